mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rtfgraph::beamformer::{apply_beamformer, mvdr_weights, shadow_filter, BeamWeights};
use rtfgraph::linalg::HermitianMatrix;
use rtfgraph::rtf::RtfSpectrum;
use rtfgraph::signal::{istft, stft, MultichannelSignal, Signal, StftConfig, TfGrid, WindowKind, C64};

const M: usize = 4;

fn random_case(rng: &mut ChaCha8Rng) -> (RtfSpectrum, HermitianMatrix) {
    let mut h = common::random_cvec(M, rng);
    h[0] = C64::new(1.0, 0.0);
    (RtfSpectrum::new(1, M, 0, h).unwrap(), common::random_pd(M, rng))
}

fn dot_h(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn noise_power(w: &[C64], phi: &HermitianMatrix) -> f64 {
    phi.quadratic_form(w)
}

proptest! {
    #[test]
    fn distortionless_and_below_delay_and_sum(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let (h, phi) = random_case(&mut r);
        let w = mvdr_weights(&h, std::slice::from_ref(&phi)).unwrap();
        let wv = w.vector(0);
        prop_assert!((dot_h(wv, h.vector(0)) - 1.0).norm() < 1e-10);
        let hh: f64 = h.vector(0).iter().map(|c| c.norm_sqr()).sum();
        let ds: Vec<C64> = h.vector(0).iter().map(|c| c / hh).collect();
        prop_assert!(noise_power(wv, &phi) <= noise_power(&ds, &phi) * (1.0 + 1e-12));
    }

    #[test]
    fn minimum_over_distortionless_competitors(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let (h, phi) = random_case(&mut r);
        let hv = h.vector(0);
        let w = mvdr_weights(&h, std::slice::from_ref(&phi)).unwrap();
        let best = noise_power(w.vector(0), &phi);
        let hh: f64 = hv.iter().map(|c| c.norm_sqr()).sum();
        for _ in 0..100 {
            // w + z with z orthogonal to h keeps w^H h = 1
            let z = common::random_cvec(M, &mut r);
            let c = dot_h(hv, &z) / hh;
            let comp: Vec<C64> = w.vector(0).iter().zip(&z).zip(hv).map(|((a, b), hk)| a + b - c * hk).collect();
            prop_assert!((dot_h(&comp, hv) - 1.0).norm() < 1e-9);
            prop_assert!(best <= noise_power(&comp, &phi) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn covariance_scale_does_not_change_weights(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let mut r = common::rng(seed);
        let (h, phi) = random_case(&mut r);
        let a = mvdr_weights(&h, std::slice::from_ref(&phi)).unwrap();
        let b = mvdr_weights(&h, &[phi.scaled(c)]).unwrap();
        for (x, y) in a.vector(0).iter().zip(b.vector(0)) {
            prop_assert!((x - y).norm() < 1e-9 * (1.0 + x.norm()));
        }
    }
}

fn cfg() -> StftConfig {
    StftConfig::new(64, 16, WindowKind::SqrtHann).unwrap()
}

fn random_grid(frames: usize, channels: usize, rng: &mut ChaCha8Rng) -> TfGrid {
    let data = (0..frames * 64 * channels)
        .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    TfGrid::from_data(frames, channels, data, cfg(), 16000).unwrap()
}

#[test]
fn rank_one_grid_passes_the_source() {
    let mut r = common::rng(3);
    let bins = 64;
    let mut hdata = Vec::new();
    let mut phis = Vec::new();
    for _ in 0..bins {
        let mut v = common::random_cvec(M, &mut r);
        v[1] = C64::new(1.0, 0.0);
        hdata.extend(v);
        phis.push(common::random_pd(M, &mut r));
    }
    let h = RtfSpectrum::new(bins, M, 1, hdata).unwrap();
    let w = mvdr_weights(&h, &phis).unwrap();
    let s = random_grid(5, 1, &mut r);
    let mut data = Vec::new();
    for l in 0..5 {
        for k in 0..bins {
            let sv = s.get(l, k, 0);
            data.extend(h.vector(k).iter().map(|hk| hk * sv));
        }
    }
    let grid = TfGrid::from_data(5, M, data, cfg(), 16000).unwrap();
    let y = apply_beamformer(&w, &grid).unwrap();
    for (a, b) in y.data().iter().zip(s.data()) {
        assert!((a - b).norm() < 1e-9);
    }
}

#[test]
fn beamforming_is_linear_in_the_grid() {
    let mut r = common::rng(4);
    let w = BeamWeights::new(64, 3, 0, common::random_cvec(64 * 3, &mut r)).unwrap();
    let a = random_grid(4, 3, &mut r);
    let b = random_grid(4, 3, &mut r);
    let c = C64::new(0.3, -1.2);
    let lhs = apply_beamformer(&w, &a.scaled(c).add(&b).unwrap()).unwrap();
    let ya = apply_beamformer(&w, &a).unwrap();
    let yb = apply_beamformer(&w, &b).unwrap();
    for ((l, x), y) in lhs.data().iter().zip(ya.data()).zip(yb.data()) {
        assert!((l - (c * x + y)).norm() < 1e-12);
    }
}

fn random_signal(len: usize, rng: &mut ChaCha8Rng) -> MultichannelSignal {
    let chans = (0..3)
        .map(|_| Signal::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000).unwrap())
        .collect();
    MultichannelSignal::new(chans, 0).unwrap()
}

#[test]
fn shadow_outputs_add_up_to_the_mixture_output() {
    let mut r = common::rng(5);
    let s = random_signal(800, &mut r);
    let v = random_signal(800, &mut r);
    let gs = stft(&s, &cfg()).unwrap();
    let gv = stft(&v, &cfg()).unwrap();
    let gx = stft(&s.add(&v).unwrap(), &cfg()).unwrap();
    let w = BeamWeights::new(64, 3, 0, common::random_cvec(64 * 3, &mut r)).unwrap();
    let (ys, yv) = shadow_filter(&w, &gs, &gv).unwrap();
    let yx = istft(&apply_beamformer(&w, &gx).unwrap(), &cfg()).unwrap().remove(0);
    for ((a, b), c) in ys.samples().iter().zip(yv.samples()).zip(yx.samples()) {
        assert!((a + b - c).abs() < 1e-10);
    }
    let zero = stft(&v.scaled(0.0), &cfg()).unwrap();
    let (_, none) = shadow_filter(&w, &gs, &zero).unwrap();
    assert!(none.samples().iter().all(|x| *x == 0.0));
}

#[test]
fn mismatched_shapes_rejected() {
    let mut r = common::rng(6);
    let w = BeamWeights::new(64, 3, 0, common::random_cvec(64 * 3, &mut r)).unwrap();
    assert!(apply_beamformer(&w, &random_grid(2, 4, &mut r)).is_err());
    let (h, phi) = random_case(&mut r);
    assert!(mvdr_weights(&h, &[phi.clone(), phi]).is_err());
    assert!(BeamWeights::new(64, 3, 3, vec![C64::default(); 192]).is_err());
}
