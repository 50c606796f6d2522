//! Time-domain and time-frequency signal primitives.

mod conv;
mod fft;
mod gen;
mod stft;
mod wav;

pub use conv::{convolve, convolve_slices};
pub use fft::{fft, fft_in_place, ifft_real_in_place};
pub use gen::{
    gen_pink_noise, gen_speech_like, gen_speech_like_with, gen_white_noise, pink_fir,
    SpeechLikeConfig,
};
pub use stft::{istft, stft, StftConfig, TfGrid, WindowKind};
pub(crate) use stft::{istft_raw, ola_norm};
pub use wav::{wav_read, wav_write, WavFormat};

use crate::error::{Error, Result};

pub use num_complex::Complex64 as C64;

/// Default sample rate for all synthetic audio.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono real-valued signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn scaled(&self, gain: f64) -> Signal {
        Signal {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Equal-length channels captured by an array, one of which is the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct MultichannelSignal {
    channels: Vec<Signal>,
    ref_index: usize,
}

impl MultichannelSignal {
    pub fn new(channels: Vec<Signal>, ref_index: usize) -> Result<Self> {
        if channels.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 channels, got {}",
                channels.len()
            )));
        }
        if ref_index >= channels.len() {
            return Err(Error::InvalidInput(format!(
                "reference index {ref_index} out of range for {} channels",
                channels.len()
            )));
        }
        let (len, rate) = (channels[0].len(), channels[0].sample_rate());
        if channels
            .iter()
            .any(|c| c.len() != len || c.sample_rate() != rate)
        {
            return Err(Error::Shape(
                "channels differ in length or sample rate".into(),
            ));
        }
        Ok(Self {
            channels,
            ref_index,
        })
    }

    pub fn channels(&self) -> &[Signal] {
        &self.channels
    }

    pub fn channel(&self, m: usize) -> &Signal {
        &self.channels[m]
    }

    pub fn reference(&self) -> &Signal {
        &self.channels[self.ref_index]
    }

    pub fn ref_index(&self) -> usize {
        self.ref_index
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.channels[0].sample_rate()
    }

    pub fn scaled(&self, gain: f64) -> MultichannelSignal {
        MultichannelSignal {
            channels: self.channels.iter().map(|c| c.scaled(gain)).collect(),
            ref_index: self.ref_index,
        }
    }

    /// Element-wise sum of two captures with identical shape.
    pub fn add(&self, other: &MultichannelSignal) -> Result<MultichannelSignal> {
        check_same_shape(self, other)?;
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| Signal {
                samples: a.samples.iter().zip(&b.samples).map(|(x, y)| x + y).collect(),
                sample_rate: a.sample_rate,
            })
            .collect();
        Ok(MultichannelSignal {
            channels,
            ref_index: self.ref_index,
        })
    }
}

fn check_same_shape(a: &MultichannelSignal, b: &MultichannelSignal) -> Result<()> {
    if a.num_channels() != b.num_channels() || a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.num_channels(),
            a.len(),
            b.num_channels(),
            b.len()
        )));
    }
    if a.sample_rate() != b.sample_rate() {
        return Err(Error::Shape("sample rates differ".into()));
    }
    Ok(())
}

pub(crate) fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn masked_energy(x: &[f64], active: Option<&[bool]>) -> f64 {
    match active {
        Some(mask) => x
            .iter()
            .zip(mask)
            .filter(|(_, &a)| a)
            .map(|(v, _)| v * v)
            .sum(),
        None => energy(x),
    }
}

/// Scales `noise` so the reference-channel SNR of `target + scale * noise`
/// equals `snr_db`, measured over the samples flagged in `active` (all samples
/// when `None`). Returns the mixture and the applied noise scale.
pub fn mix_at_snr(
    target: &MultichannelSignal,
    noise: &MultichannelSignal,
    snr_db: f64,
    active: Option<&[bool]>,
) -> Result<(MultichannelSignal, f64)> {
    check_same_shape(target, noise)?;
    if let Some(mask) = active {
        if mask.len() != target.len() {
            return Err(Error::Shape(format!(
                "activity mask has {} samples, signal has {}",
                mask.len(),
                target.len()
            )));
        }
    }
    let target_energy = masked_energy(target.reference().samples(), active);
    if target_energy <= 0.0 {
        return Err(Error::InvalidInput("target has zero energy".into()));
    }
    let noise_energy = masked_energy(noise.reference().samples(), active);
    if noise_energy <= 0.0 {
        return Err(Error::InvalidInput("noise has zero energy".into()));
    }
    let scale = (target_energy / noise_energy / 10f64.powf(snr_db / 10.0)).sqrt();
    let mixture = target.add(&noise.scaled(scale))?;
    Ok((mixture, scale))
}
