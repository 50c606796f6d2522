//! Output SNR, SI-SDR, signal blocking factor, STOI and ESTOI, together with
//! the gradients of the quantities used as training objectives.

use std::f64::consts::{LN_10, PI};

use crate::error::{Error, Result};
use crate::rtf::RtfFeature;
use crate::signal::{convolve_slices, fft_in_place, C64};
use crate::util::db_clamped;

pub const DB_CLAMP: f64 = 150.0;
const DB_PER_LN: f64 = 10.0 / LN_10;
const EPS: f64 = f64::EPSILON;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_equal_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} samples", a.len(), b.len())));
    }
    Ok(())
}

/// `10 log10(|s|^2 / |v|^2)`; a silent residual clamps to +150 dB.
pub fn snr_out(s: &[f64], v: &[f64]) -> Result<f64> {
    check_equal_len(s, v)?;
    Ok(db_clamped(dot(s, s), dot(v, v)))
}

/// Scale-invariant SDR of `estimate` against `reference`, in dB.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    Ok(si_sdr_grad(reference, estimate)?.0)
}

/// SI-SDR and its gradient with respect to the estimate. The gradient is zero
/// wherever the value sits on a clamp.
pub fn si_sdr_grad(reference: &[f64], estimate: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_equal_len(reference, estimate)?;
    let ss = dot(reference, reference);
    if ss <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let alpha = dot(reference, estimate) / ss;
    let target = alpha * alpha * ss;
    let err: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(s, e)| (alpha * s - e).powi(2))
        .sum();
    let value = db_clamped(target, err);
    let mut grad = vec![0.0; estimate.len()];
    if value.abs() < DB_CLAMP && target > 0.0 && err > 0.0 {
        // d target = 2 alpha s, d err = 2 (e - alpha s)
        for ((g, s), e) in grad.iter_mut().zip(reference).zip(estimate) {
            *g = DB_PER_LN * (2.0 * alpha * s / target - 2.0 * (e - alpha * s) / err);
        }
    }
    Ok((value, grad))
}

fn sbf_checks(oracle: &RtfFeature, estimate: &RtfFeature, s_ref: &[f64]) -> Result<()> {
    if oracle.dim() != estimate.dim() || oracle.rows() != estimate.rows() {
        return Err(Error::Shape("feature sets differ in shape".into()));
    }
    if s_ref.iter().all(|v| *v == 0.0) {
        return Err(Error::ZeroReference);
    }
    Ok(())
}

/// Signal blocking factor: mean over non-reference microphones of
/// `10 log10(|h_o * s|^2 / |(h_o - h_e) * s|^2)`.
pub fn sbf(oracle: &RtfFeature, estimate: &RtfFeature, s_ref: &[f64]) -> Result<f64> {
    Ok(sbf_grad(oracle, estimate, s_ref)?.0)
}

/// SBF and its gradient with respect to the estimated features.
pub fn sbf_grad(oracle: &RtfFeature, estimate: &RtfFeature, s_ref: &[f64]) -> Result<(f64, Vec<f64>)> {
    sbf_checks(oracle, estimate, s_ref)?;
    let rows = oracle.rows();
    let d = oracle.dim();
    let reversed: Vec<f64> = s_ref.iter().rev().copied().collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; rows * d];
    for r in 0..rows {
        let x = convolve_slices(oracle.row(r), s_ref);
        let x_energy = dot(&x, &x);
        if x_energy <= 0.0 {
            return Err(Error::InvalidInput(format!("oracle row {r} filters the reference to silence")));
        }
        let diff: Vec<f64> = oracle.row(r).iter().zip(estimate.row(r)).map(|(a, b)| a - b).collect();
        let e = convolve_slices(&diff, s_ref);
        let e_energy = dot(&e, &e);
        let value = db_clamped(x_energy, e_energy);
        total += value;
        if value.abs() < DB_CLAMP && e_energy > 0.0 {
            // dV/dh_e[j] = (10/ln10) * 2 * sum_n e[n] s[n-j] / |e|^2
            let corr = convolve_slices(&e, &reversed);
            let offset = s_ref.len() - 1;
            for j in 0..d {
                grad[r * d + j] = DB_PER_LN * 2.0 * corr[j + offset] / e_energy / rows as f64;
            }
        }
    }
    Ok((total / rows as f64, grad))
}

/// Mean squared feature error; the auxiliary objective.
pub fn feature_mse_grad(target: &RtfFeature, estimate: &RtfFeature) -> Result<(f64, Vec<f64>)> {
    if target.data().len() != estimate.data().len() {
        return Err(Error::Shape("feature sets differ in shape".into()));
    }
    let n = target.data().len() as f64;
    let diff: Vec<f64> = estimate.data().iter().zip(target.data()).map(|(e, t)| e - t).collect();
    let value = dot(&diff, &diff) / n;
    Ok((value, diff.iter().map(|v| 2.0 * v / n).collect()))
}

// ---------------------------------------------------------------------------
// STOI

pub const STOI_RATE: usize = 10_000;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const NUM_BANDS: usize = 15;
const MIN_FREQ: f64 = 150.0;
const SEGMENT: usize = 30;
const BETA_DB: f64 = -15.0;
const DYN_RANGE: f64 = 40.0;
const RESAMPLE_TAPS: usize = 120;
/// Soft clip temperature relative to the clip level.
const SOFT_CLIP_TAU: f64 = 0.01;

fn stoi_window() -> Vec<f64> {
    // interior of a (FRAME + 2)-point Hann window
    (1..=FRAME)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (FRAME + 1) as f64).cos())
        .collect()
}

/// Band index of every one-sided bin, `None` outside all bands.
fn third_octave_bands() -> Vec<Option<usize>> {
    let bins = NFFT / 2 + 1;
    let f: Vec<f64> = (0..bins).map(|i| i as f64 * STOI_RATE as f64 / NFFT as f64).collect();
    let nearest = |target: f64| {
        let mut best = 0;
        for (i, v) in f.iter().enumerate() {
            if (v - target).powi(2) < (f[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    let mut band = vec![None; bins];
    for b in 0..NUM_BANDS {
        let k = b as f64;
        let lo = nearest(MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0));
        let hi = nearest(MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0));
        for slot in band.iter_mut().take(hi).skip(lo) {
            *slot = Some(b);
        }
    }
    band
}

fn resample_filter() -> Vec<f64> {
    let (up, down) = (5usize, 8usize);
    let cutoff = 0.5 / down.max(up) as f64;
    let center = (RESAMPLE_TAPS - 1) as f64 / 2.0;
    (0..RESAMPLE_TAPS)
        .map(|i| {
            let t = i as f64 - center;
            let x = 2.0 * cutoff * t;
            let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
            let win = 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / RESAMPLE_TAPS as f64).cos();
            up as f64 * 2.0 * cutoff * sinc * win
        })
        .collect()
}

/// Rational 5/8 resampler, 16 kHz to 10 kHz: zero-stuffing, a windowed-sinc
/// low-pass at the lower Nyquist, decimation, delay compensated.
struct Resampler {
    taps: Vec<f64>,
    delay: usize,
}

impl Resampler {
    const UP: usize = 5;
    const DOWN: usize = 8;

    fn new() -> Self {
        Self {
            taps: resample_filter(),
            delay: (RESAMPLE_TAPS - 1) / 2,
        }
    }

    fn out_len(n: usize) -> usize {
        (n * Self::UP).div_ceil(Self::DOWN)
    }

    /// Calls `f(out_index, in_index, tap)` for every nonzero term.
    fn for_each_term(&self, n: usize, mut f: impl FnMut(usize, usize, f64)) {
        let up_len = n * Self::UP;
        for j in 0..Self::out_len(n) {
            let pos = j * Self::DOWN + self.delay;
            for (t, &h) in self.taps.iter().enumerate() {
                if t > pos || pos - t >= up_len || !(pos - t).is_multiple_of(Self::UP) {
                    continue;
                }
                f(j, (pos - t) / Self::UP, h);
            }
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; Self::out_len(x.len())];
        self.for_each_term(x.len(), |j, i, h| y[j] += h * x[i]);
        y
    }

    fn adjoint(&self, g: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        self.for_each_term(n, |j, i, h| out[i] += h * g[j]);
        out
    }
}

fn to_stoi_rate(x: &[f64], rate: u32) -> Result<Vec<f64>> {
    match rate {
        10_000 => Ok(x.to_vec()),
        16_000 => Ok(Resampler::new().apply(x)),
        other => Err(Error::InvalidInput(format!("STOI needs 10 or 16 kHz input, got {other} Hz"))),
    }
}

fn frame_starts(len: usize) -> Vec<usize> {
    if len <= FRAME {
        return Vec::new();
    }
    (0..len - FRAME).step_by(HOP).collect()
}

/// Starts of frames within `DYN_RANGE` dB of the loudest reference frame.
fn active_frames(x: &[f64], win: &[f64]) -> Vec<usize> {
    let starts = frame_starts(x.len());
    let energies: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let e: f64 = (0..FRAME).map(|i| (win[i] * x[s + i]).powi(2)).sum();
            20.0 * (e.sqrt() + EPS).log10()
        })
        .collect();
    let peak = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    starts
        .into_iter()
        .zip(energies)
        .filter(|(_, e)| peak - DYN_RANGE - e < 0.0)
        .map(|(s, _)| s)
        .collect()
}

/// Overlap-add of the windowed kept frames.
fn remove_silence(x: &[f64], kept: &[usize], win: &[f64]) -> Vec<f64> {
    if kept.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; (kept.len() - 1) * HOP + FRAME];
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..FRAME {
            out[j * HOP + i] += win[i] * x[s + i];
        }
    }
    out
}

fn remove_silence_adjoint(g: &[f64], kept: &[usize], win: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (j, &s) in kept.iter().enumerate() {
        for i in 0..FRAME {
            out[s + i] += win[i] * g[j * HOP + i];
        }
    }
    out
}

/// One-sided spectra of the analysis frames, frame-major.
fn spectra(x: &[f64], win: &[f64]) -> Vec<Vec<C64>> {
    frame_starts(x.len())
        .into_iter()
        .map(|s| {
            let mut buf = vec![C64::default(); NFFT];
            for i in 0..FRAME {
                buf[i].re = win[i] * x[s + i];
            }
            fft_in_place(&mut buf, false).expect("power of two");
            buf.truncate(NFFT / 2 + 1);
            buf
        })
        .collect()
}

/// Band envelopes `[band][frame]` as square roots of the band energies.
fn band_envelopes(spec: &[Vec<C64>], bands: &[Option<usize>]) -> Vec<Vec<f64>> {
    let mut env = vec![vec![0.0; spec.len()]; NUM_BANDS];
    for (t, frame) in spec.iter().enumerate() {
        for (k, v) in frame.iter().enumerate() {
            if let Some(b) = bands[k] {
                env[b][t] += v.norm_sqr();
            }
        }
    }
    for row in env.iter_mut() {
        row.iter_mut().for_each(|v| *v = v.sqrt());
    }
    env
}

/// Reference-side analysis shared by the metric and the differentiable loss.
struct StoiReference {
    kept: Vec<usize>,
    env: Vec<Vec<f64>>,
    frames: usize,
}

struct StoiContext {
    win: Vec<f64>,
    bands: Vec<Option<usize>>,
}

impl StoiContext {
    fn new() -> Self {
        Self {
            win: stoi_window(),
            bands: third_octave_bands(),
        }
    }

    fn reference(&self, x: &[f64]) -> Result<StoiReference> {
        let kept = active_frames(x, &self.win);
        let xs = remove_silence(x, &kept, &self.win);
        let spec = spectra(&xs, &self.win);
        if spec.len() < SEGMENT {
            return Err(Error::TooShort {
                needed: SEGMENT,
                got: spec.len(),
            });
        }
        let frames = spec.len();
        Ok(StoiReference {
            kept,
            env: band_envelopes(&spec, &self.bands),
            frames,
        })
    }

    fn degraded_envelopes(&self, r: &StoiReference, y: &[f64]) -> (Vec<f64>, Vec<Vec<C64>>, Vec<Vec<f64>>) {
        let ys = remove_silence(y, &r.kept, &self.win);
        let spec = spectra(&ys, &self.win);
        let env = band_envelopes(&spec, &self.bands);
        (ys, spec, env)
    }
}

fn check_stoi_inputs(x: &[f64], y: &[f64], rate: u32) -> Result<(Vec<f64>, Vec<f64>)> {
    check_equal_len(x, y)?;
    Ok((to_stoi_rate(x, rate)?, to_stoi_rate(y, rate)?))
}

fn centered_unit(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = dot(&c, &c).sqrt() + EPS;
    c.iter().map(|x| x / norm).collect()
}

fn assert_unit_interval(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    assert!((0.0..=1.0).contains(&v), "intelligibility score {v} outside [0, 1]");
    v
}

/// Short-time objective intelligibility of `y` against the clean `x`.
/// `rate` is 10 or 16 kHz; 16 kHz input is resampled first.
pub fn stoi(x: &[f64], y: &[f64], rate: u32) -> Result<f64> {
    let (x, y) = check_stoi_inputs(x, y, rate)?;
    let ctx = StoiContext::new();
    let r = ctx.reference(&x)?;
    let (_, _, ye) = ctx.degraded_envelopes(&r, &y);
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let segments = r.frames - SEGMENT + 1;
    for m in SEGMENT..=r.frames {
        for b in 0..NUM_BANDS {
            let xs = &r.env[b][m - SEGMENT..m];
            let ys = &ye[b][m - SEGMENT..m];
            let alpha = dot(xs, xs).sqrt() / (dot(ys, ys).sqrt() + EPS);
            let yp: Vec<f64> = ys.iter().zip(xs).map(|(y, x)| (alpha * y).min(x * clip)).collect();
            total += dot(&centered_unit(&yp), &centered_unit(xs));
        }
    }
    Ok(assert_unit_interval(total / (segments * NUM_BANDS) as f64))
}

/// Extended STOI: correlation of row- then column-normalized band envelope
/// segments.
pub fn estoi(x: &[f64], y: &[f64], rate: u32) -> Result<f64> {
    let (x, y) = check_stoi_inputs(x, y, rate)?;
    let ctx = StoiContext::new();
    let r = ctx.reference(&x)?;
    let (_, _, ye) = ctx.degraded_envelopes(&r, &y);
    let normalize = |env: &[Vec<f64>], m: usize| -> Vec<f64> {
        // [band][frame] segment; rows over time, then columns over bands
        let mut seg: Vec<f64> = Vec::with_capacity(NUM_BANDS * SEGMENT);
        for row in env {
            seg.extend(centered_unit_exact(&row[m - SEGMENT..m]));
        }
        for t in 0..SEGMENT {
            let col: Vec<f64> = (0..NUM_BANDS).map(|b| seg[b * SEGMENT + t]).collect();
            for (b, v) in centered_unit_exact(&col).into_iter().enumerate() {
                seg[b * SEGMENT + t] = v;
            }
        }
        seg
    };
    let segments = r.frames - SEGMENT + 1;
    let mut total = 0.0;
    for m in SEGMENT..=r.frames {
        total += dot(&normalize(&r.env, m), &normalize(&ye, m)) / SEGMENT as f64;
    }
    Ok(assert_unit_interval(total / segments as f64))
}

/// Centering and unit-norm scaling without regularization; an all-constant
/// vector maps to zeros.
fn centered_unit_exact(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = dot(&c, &c).sqrt();
    if norm > 0.0 {
        c.iter().map(|x| x / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Differentiable STOI: the standard pipeline with the hard clip replaced by
/// `c - tau * softplus((c - y) / tau)`, `tau = 0.01 c`. Returns the value and
/// its gradient with respect to `y` at the input rate.
pub fn soft_stoi_grad(x: &[f64], y: &[f64], rate: u32) -> Result<(f64, Vec<f64>)> {
    let (x10, y10) = check_stoi_inputs(x, y, rate)?;
    let ctx = StoiContext::new();
    let r = ctx.reference(&x10)?;
    let (ys, yspec, ye) = ctx.degraded_envelopes(&r, &y10);
    let clip = 1.0 + 10f64.powf(-BETA_DB / 20.0);
    let segments = r.frames - SEGMENT + 1;
    let scale = 1.0 / (segments * NUM_BANDS) as f64;
    let mut total = 0.0;
    let mut g_env = vec![vec![0.0; r.frames]; NUM_BANDS];
    for m in SEGMENT..=r.frames {
        for b in 0..NUM_BANDS {
            let xs = &r.env[b][m - SEGMENT..m];
            let yseg = &ye[b][m - SEGMENT..m];
            let nx = dot(xs, xs).sqrt();
            let ny = dot(yseg, yseg).sqrt();
            let alpha = nx / (ny + EPS);
            let yn: Vec<f64> = yseg.iter().map(|v| alpha * v).collect();
            let mut yc = Vec::with_capacity(SEGMENT);
            let mut dclip = Vec::with_capacity(SEGMENT);
            for (v, xv) in yn.iter().zip(xs) {
                let c = xv * clip;
                if c > 0.0 {
                    let tau = SOFT_CLIP_TAU * c;
                    let z = (c - v) / tau;
                    yc.push(c - tau * softplus(z));
                    dclip.push(sigmoid(z));
                } else {
                    yc.push(v.min(c));
                    dclip.push(if *v < c { 1.0 } else { 0.0 });
                }
            }
            let mean = yc.iter().sum::<f64>() / SEGMENT as f64;
            let a: Vec<f64> = yc.iter().map(|v| v - mean).collect();
            let na = dot(&a, &a).sqrt();
            let bhat = centered_unit(xs);
            let den = na + EPS;
            let corr = dot(&a, &bhat) / den;
            total += corr;
            // d corr / d a
            let mut ga: Vec<f64> = bhat.iter().map(|v| v / den).collect();
            if na > 0.0 {
                let k = dot(&a, &bhat) / (den * den * na);
                for (g, av) in ga.iter_mut().zip(&a) {
                    *g -= k * av;
                }
            }
            let gmean = ga.iter().sum::<f64>() / SEGMENT as f64;
            let gyn: Vec<f64> = ga.iter().zip(&dclip).map(|(g, d)| (g - gmean) * d).collect();
            // y_n = alpha * y with alpha = nx / (|y| + eps)
            let proj = dot(&gyn, yseg);
            for (t, gv) in gyn.iter().enumerate() {
                let mut g = alpha * gv;
                if ny > 0.0 {
                    g -= nx * proj * yseg[t] / ((ny + EPS).powi(2) * ny);
                }
                g_env[b][m - SEGMENT + t] += g * scale;
            }
        }
    }
    // envelope = sqrt(band energy); |Y|^2 contributes 2 Y g
    let mut g_ys = vec![0.0; ys.len()];
    let starts = frame_starts(ys.len());
    let mut buf = vec![C64::default(); NFFT];
    for (t, &s) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|v| *v = C64::default());
        for (k, v) in yspec[t].iter().enumerate() {
            if let Some(b) = ctx.bands[k] {
                let e = ye[b][t];
                if e > 0.0 {
                    buf[k] = v * (g_env[b][t] / e);
                }
            }
        }
        // adjoint of a zero-padded forward DFT: Re(N * IDFT(G))
        fft_in_place(&mut buf, true)?;
        for i in 0..FRAME {
            g_ys[s + i] += ctx.win[i] * buf[i].re * NFFT as f64;
        }
    }
    let g10 = remove_silence_adjoint(&g_ys, &r.kept, &ctx.win, y10.len());
    let grad = match rate {
        16_000 => Resampler::new().adjoint(&g10, y.len()),
        _ => g10,
    };
    Ok((total * scale, grad))
}
