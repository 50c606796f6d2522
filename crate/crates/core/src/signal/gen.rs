use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{fft::fft_in_place, Signal, C64, SAMPLE_RATE};

const PINK_TAPS: usize = 63;
const PINK_DESIGN_LEN: usize = 8192;
const PINK_FLOOR_HZ: f64 = 100.0;

pub fn gen_white_noise(n: usize, seed: u64, sample_rate: u32) -> Signal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Signal::new(samples, sample_rate).expect("gaussian samples are finite")
}

/// Unit-energy 63-tap FIR approximating a 1/sqrt(f) magnitude at 16 kHz,
/// designed by frequency sampling with a Hann taper. The magnitude is held
/// flat below 100 Hz.
pub fn pink_fir() -> Vec<f64> {
    let nd = PINK_DESIGN_LEN;
    let fs = SAMPLE_RATE as f64;
    let mut spec: Vec<C64> = (0..nd)
        .map(|k| {
            let f = if k <= nd / 2 { k } else { nd - k } as f64 * fs / nd as f64;
            C64::new((1000.0 / f.max(PINK_FLOOR_HZ)).sqrt(), 0.0)
        })
        .collect();
    fft_in_place(&mut spec, true).expect("power of two");
    let half = (PINK_TAPS / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .enumerate()
        .map(|(n, i)| {
            let w = 0.5 - 0.5 * (2.0 * PI * (n + 1) as f64 / (PINK_TAPS + 1) as f64).cos();
            spec[i.rem_euclid(nd as isize) as usize].re * w
        })
        .collect();
    let norm = taps.iter().map(|v| v * v).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|v| *v /= norm);
    taps
}

/// Pink (-3 dB/octave) noise: seeded white Gaussian noise through [`pink_fir`].
pub fn gen_pink_noise(n: usize, seed: u64) -> Signal {
    let taps = pink_fir();
    let white = gen_white_noise(n + taps.len() - 1, seed, SAMPLE_RATE);
    let w = white.samples();
    let samples = (0..n)
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(j, t)| t * w[i + taps.len() - 1 - j])
                .sum()
        })
        .collect();
    Signal::new(samples, SAMPLE_RATE).expect("finite")
}

/// Shape of the speech surrogate: a leading pause followed by
/// amplitude-modulated pink-noise "words" separated by pauses.
#[derive(Debug, Clone, Copy)]
pub struct SpeechLikeConfig {
    pub lead_silence_s: f64,
    pub word_s: (f64, f64),
    pub gap_s: (f64, f64),
    pub syllable_rate_hz: f64,
}

impl Default for SpeechLikeConfig {
    fn default() -> Self {
        Self {
            lead_silence_s: 0.5,
            word_s: (0.2, 0.5),
            gap_s: (0.05, 0.15),
            syllable_rate_hz: 4.0,
        }
    }
}

/// Speech surrogate with its oracle activity mask. The mask is false exactly
/// where the output is zero.
pub fn gen_speech_like(n: usize, seed: u64) -> (Signal, Vec<bool>) {
    gen_speech_like_with(n, seed, &SpeechLikeConfig::default())
}

pub fn gen_speech_like_with(n: usize, seed: u64, cfg: &SpeechLikeConfig) -> (Signal, Vec<bool>) {
    let fs = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eec_4a11_7e57_0001);
    let carrier = gen_pink_noise(n, rng.random());
    let mut out = vec![0.0; n];
    let mut mask = vec![false; n];
    let lead = ((cfg.lead_silence_s * fs) as usize).min(n / 4);
    let mut pos = lead;
    let syllable = cfg.syllable_rate_hz / fs;
    while pos < n {
        let word = (rng.random_range(cfg.word_s.0..cfg.word_s.1) * fs) as usize;
        let end = (pos + word.max(1)).min(n);
        let len = end - pos;
        let gain = rng.random_range(0.5..1.0);
        let phase = rng.random_range(0.0..2.0 * PI);
        for i in 0..len {
            let taper = (PI * (i as f64 + 0.5) / len as f64).sin().sqrt();
            let modulation = 0.55 + 0.45 * (2.0 * PI * syllable * i as f64 + phase).sin();
            let v = carrier.samples()[pos + i] * gain * taper * modulation;
            if v != 0.0 {
                out[pos + i] = v;
                mask[pos + i] = true;
            }
        }
        let gap = (rng.random_range(cfg.gap_s.0..cfg.gap_s.1) * fs) as usize;
        pos = end + gap.max(1);
    }
    (Signal::new(out, SAMPLE_RATE).expect("finite"), mask)
}
