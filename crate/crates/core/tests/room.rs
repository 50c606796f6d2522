use rtfgraph::room::{build_scene, image_source_air, render_position, RoomSpec, SceneSpec, SourceId};
use rtfgraph::signal::{fft_in_place, gen_pink_noise, Signal, C64, SAMPLE_RATE};

/// Keeps the octave band around `center` Hz with raised-cosine edges, using a
/// zero-padded FFT so the filter tails do not wrap.
fn octave_band(h: &[f64], center: f64) -> Vec<f64> {
    let n = (2 * h.len()).next_power_of_two();
    let mut buf: Vec<C64> = h.iter().map(|v| C64::new(*v, 0.0)).collect();
    buf.resize(n, C64::default());
    fft_in_place(&mut buf, false).unwrap();
    let (lo, hi) = (center / 2f64.sqrt(), center * 2f64.sqrt());
    for (k, v) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * SAMPLE_RATE as f64 / n as f64;
        // half-octave cosine skirts on a log-frequency axis
        let edge = |x: f64| {
            let t = (x.log2() + 0.25) / 0.5;
            if t <= 0.0 { 0.0 } else if t >= 1.0 { 1.0 } else { 0.5 - 0.5 * (std::f64::consts::PI * t).cos() }
        };
        let g = if f <= 0.0 { 0.0 } else { edge(f / lo) * edge(hi / f) };
        *v *= g;
    }
    fft_in_place(&mut buf, true).unwrap();
    buf[..h.len()].iter().map(|v| v.re).collect()
}

/// T60 from the Schroeder energy decay curve, extrapolated from the -5..-25 dB
/// least-squares slope.
fn schroeder_t60(h: &[f64]) -> f64 {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let total = edc[0];
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .map(|(i, e)| (i as f64 / SAMPLE_RATE as f64, 10.0 * (e / total).log10()))
        .filter(|(_, db)| *db <= -5.0 && *db >= -25.0)
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -60.0 / (sxy / sxx)
}

/// Mid-frequency reverberation time: mean of the 500 Hz and 1 kHz octave bands.
fn t60_mid(h: &[f64]) -> f64 {
    0.5 * (schroeder_t60(&octave_band(h, 500.0)) + schroeder_t60(&octave_band(h, 1000.0)))
}

#[test]
fn schroeder_t60_matches_target() {
    for t60 in [0.3, 0.6] {
        let room = RoomSpec::desk_scale(t60);
        let air = image_source_air(&room, &[2.1, 3.4, 1.3], &[3.9, 1.2, 1.1], 16000).unwrap();
        let est = t60_mid(&air.taps);
        assert!((est / t60 - 1.0).abs() < 0.25, "target {t60}, estimated {est}");
    }
}

#[test]
fn direct_path_delay_within_half_sample() {
    let room = RoomSpec::desk_scale(0.0);
    let src = [0.4, 3.0, 1.2];
    for dist in [0.5, 1.1, 2.345, 3.7, 5.0] {
        let mic = [0.4 + dist, 3.0, 1.2];
        let air = image_source_air(&room, &src, &mic, 512).unwrap();
        let peak = air
            .taps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        let expect = dist / 343.0 * 16000.0;
        assert!((peak as f64 - expect).abs() <= 0.5, "{dist}: {peak} vs {expect}");
    }
}

#[test]
fn render_is_linear() {
    let room = RoomSpec::desk_scale(0.3);
    let scene = build_scene(&SceneSpec::desk_scale(), &room).unwrap();
    let a = gen_pink_noise(3000, 1);
    let b = gen_pink_noise(3000, 2);
    let sum: Vec<f64> = a.samples().iter().zip(b.samples()).map(|(x, y)| x + y).collect();
    let sum = Signal::new(sum, SAMPLE_RATE).unwrap();
    let id = SourceId::Oog(2);
    let ra = render_position(&scene, &room, id, &a, 1024).unwrap();
    let rb = render_position(&scene, &room, id, &b, 1024).unwrap();
    let rs = render_position(&scene, &room, id, &sum, 1024).unwrap();
    assert_eq!(rs.len(), 3000 + 1024 - 1);
    for m in 0..5 {
        for i in 0..rs.len() {
            let d = rs.channel(m).samples()[i] - ra.channel(m).samples()[i] - rb.channel(m).samples()[i];
            assert!(d.abs() < 1e-10);
        }
    }
}

#[test]
fn render_energy_matches_autocorrelation_prediction() {
    // sum_n y[n]^2 = sum_{k} r_x[k] r_h[k] with r the deterministic autocorrelations
    let room = RoomSpec::desk_scale(0.3);
    let scene = build_scene(&SceneSpec::desk_scale(), &room).unwrap();
    let x = gen_pink_noise(4000, 9);
    let id = SourceId::Grid(17);
    let airs = scene.airs(&room, id, 1024).unwrap();
    let out = render_position(&scene, &room, id, &x, 1024).unwrap();
    let autocorr = |v: &[f64], k: usize| -> f64 { v.iter().zip(&v[k..]).map(|(a, b)| a * b).sum() };
    for (m, air) in airs.iter().enumerate() {
        let mut pred = autocorr(x.samples(), 0) * autocorr(&air.taps, 0);
        for k in 1..1024 {
            pred += 2.0 * autocorr(x.samples(), k) * autocorr(&air.taps, k);
        }
        let got = out.channel(m).energy();
        assert!((got / pred - 1.0).abs() < 0.01, "mic {m}: {got} vs {pred}");
    }
}

