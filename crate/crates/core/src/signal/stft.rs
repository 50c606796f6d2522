use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::fft::fft_in_place;
use super::{MultichannelSignal, Signal, C64};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Hann analysis window, rectangular synthesis.
    Hann,
    /// Square-root Hann for both analysis and synthesis.
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_len: 2048,
            hop: 512,
            window: WindowKind::SqrtHann,
        }
    }
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

impl StftConfig {
    pub fn new(fft_len: usize, hop: usize, window: WindowKind) -> Result<Self> {
        let cfg = Self {
            fft_len,
            hop,
            window,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of frequency bins (two-sided).
    pub fn bins(&self) -> usize {
        self.fft_len
    }

    pub fn analysis_window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Hann => periodic_hann(self.fft_len),
            WindowKind::SqrtHann => periodic_hann(self.fft_len)
                .into_iter()
                .map(f64::sqrt)
                .collect(),
        }
    }

    pub fn synthesis_window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::Hann => vec![1.0; self.fft_len],
            WindowKind::SqrtHann => self.analysis_window(),
        }
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.fft_len {
            0
        } else {
            (len - self.fft_len) / self.hop + 1
        }
    }

    pub fn output_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.fft_len
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_len.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(self.fft_len));
        }
        if self.hop == 0 || !self.fft_len.is_multiple_of(self.hop) {
            return Err(Error::InvalidInput(format!(
                "hop {} does not divide fft length {}",
                self.hop, self.fft_len
            )));
        }
        // constant overlap-add of the analysis*synthesis product
        let prod: Vec<f64> = self
            .analysis_window()
            .iter()
            .zip(self.synthesis_window())
            .map(|(a, s)| a * s)
            .collect();
        let sums: Vec<f64> = (0..self.hop)
            .map(|r| prod.iter().skip(r).step_by(self.hop).sum())
            .collect();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        if sums.iter().any(|s| (s - mean).abs() > 1e-9 * mean.abs().max(1.0)) {
            return Err(Error::InvalidInput(format!(
                "window is not constant-overlap-add at hop {}",
                self.hop
            )));
        }
        Ok(())
    }
}

/// Complex STFT values indexed by (frame, bin, channel), channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct TfGrid {
    frames: usize,
    bins: usize,
    channels: usize,
    data: Vec<C64>,
    config: StftConfig,
    sample_rate: u32,
}

impl TfGrid {
    pub fn zeros(
        frames: usize,
        channels: usize,
        config: StftConfig,
        sample_rate: u32,
    ) -> Self {
        let bins = config.bins();
        Self {
            frames,
            bins,
            channels,
            data: vec![C64::default(); frames * bins * channels],
            config,
            sample_rate,
        }
    }

    pub fn from_data(
        frames: usize,
        channels: usize,
        data: Vec<C64>,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        let bins = config.bins();
        if data.len() != frames * bins * channels {
            return Err(Error::Shape(format!(
                "grid data has {} values, expected {}x{}x{}",
                data.len(),
                frames,
                bins,
                channels
            )));
        }
        Ok(Self {
            frames,
            bins,
            channels,
            data,
            config,
            sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, frame: usize, bin: usize, channel: usize) -> C64 {
        self.data[(frame * self.bins + bin) * self.channels + channel]
    }

    #[inline]
    pub fn set(&mut self, frame: usize, bin: usize, channel: usize, v: C64) {
        self.data[(frame * self.bins + bin) * self.channels + channel] = v;
    }

    /// The channel vector r(l, k).
    #[inline]
    pub fn vector(&self, frame: usize, bin: usize) -> &[C64] {
        let start = (frame * self.bins + bin) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn scaled(&self, gain: C64) -> TfGrid {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= gain);
        out
    }

    pub fn add(&self, other: &TfGrid) -> Result<TfGrid> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(out)
    }

    pub fn check_compatible(&self, other: &TfGrid) -> Result<()> {
        if self.frames != other.frames
            || self.bins != other.bins
            || self.channels != other.channels
            || self.config != other.config
        {
            return Err(Error::Shape(format!(
                "grid {}x{}x{} vs {}x{}x{}",
                self.frames, self.bins, self.channels, other.frames, other.bins, other.channels
            )));
        }
        Ok(())
    }
}

/// Forward transforms of two real frames packed into one complex FFT.
fn fft_real_pair(a: &[f64], b: Option<&[f64]>, buf: &mut [C64], out_a: &mut [C64], out_b: &mut [C64]) {
    let n = buf.len();
    for i in 0..n {
        buf[i] = C64::new(a[i], b.map_or(0.0, |b| b[i]));
    }
    fft_in_place(buf, false).expect("power-of-two length checked by config");
    for k in 0..n {
        let z = buf[k];
        let zc = buf[(n - k) % n].conj();
        out_a[k] = (z + zc) * 0.5;
        out_b[k] = (z - zc) * C64::new(0.0, -0.5);
    }
}

/// Short-time Fourier transform of every channel. Frame `l` covers samples
/// `[l*hop, l*hop + fft_len)` with its phase referenced to the first sample.
pub fn stft(sig: &MultichannelSignal, cfg: &StftConfig) -> Result<TfGrid> {
    let chans: Vec<&[f64]> = sig.channels().iter().map(Signal::samples).collect();
    stft_slices(&chans, cfg, sig.sample_rate())
}

pub(crate) fn stft_slices(chans: &[&[f64]], cfg: &StftConfig, sample_rate: u32) -> Result<TfGrid> {
    cfg.validate()?;
    let n = cfg.fft_len;
    let len = chans.first().map_or(0, |c| c.len());
    if chans.iter().any(|c| c.len() != len) {
        return Err(Error::Shape("channels differ in length".into()));
    }
    if len < n {
        return Err(Error::TooShort { needed: n, got: len });
    }
    let frames = cfg.num_frames(len);
    let m_count = chans.len();
    let win = cfg.analysis_window();
    let mut grid = TfGrid::zeros(frames, m_count, *cfg, sample_rate);
    let mut buf = vec![C64::default(); n];
    let mut fa = vec![0.0; n];
    let mut fb = vec![0.0; n];
    let mut sa = vec![C64::default(); n];
    let mut sb = vec![C64::default(); n];
    for l in 0..frames {
        let start = l * cfg.hop;
        let mut m = 0;
        while m < m_count {
            for i in 0..n {
                fa[i] = chans[m][start + i] * win[i];
            }
            let pair = m + 1 < m_count;
            if pair {
                for i in 0..n {
                    fb[i] = chans[m + 1][start + i] * win[i];
                }
            }
            fft_real_pair(&fa, pair.then_some(&fb[..]), &mut buf, &mut sa, &mut sb);
            for k in 0..n {
                grid.set(l, k, m, sa[k]);
                if pair {
                    grid.set(l, k, m + 1, sb[k]);
                }
            }
            m += 2;
        }
    }
    Ok(grid)
}

/// Per-sample overlap-add normalization for `frames` frames.
pub(crate) fn ola_norm(cfg: &StftConfig, frames: usize) -> Vec<f64> {
    let n = cfg.fft_len;
    let prod: Vec<f64> = cfg
        .analysis_window()
        .iter()
        .zip(cfg.synthesis_window())
        .map(|(a, s)| a * s)
        .collect();
    let mut norm = vec![0.0; cfg.output_len(frames)];
    for l in 0..frames {
        for i in 0..n {
            norm[l * cfg.hop + i] += prod[i];
        }
    }
    let peak = norm.iter().cloned().fold(0.0, f64::max);
    norm.iter()
        .map(|&v| if v > 1e-10 * peak { 1.0 / v } else { 0.0 })
        .collect()
}

/// Overlap-add synthesis of the real part of each frame's inverse transform,
/// divided by the summed analysis*synthesis window. Samples with zero window
/// coverage are set to zero.
pub fn istft(grid: &TfGrid, cfg: &StftConfig) -> Result<Vec<Signal>> {
    if grid.config() != cfg {
        return Err(Error::InvalidInput(
            "grid was produced with a different STFT configuration".into(),
        ));
    }
    let outs = istft_raw(grid)?;
    outs.into_iter()
        .map(|s| Signal::new(s, grid.sample_rate()))
        .collect()
}

pub(crate) fn istft_raw(grid: &TfGrid) -> Result<Vec<Vec<f64>>> {
    let cfg = grid.config();
    let n = cfg.fft_len;
    let frames = grid.frames();
    let chans = grid.channels();
    let synth = cfg.synthesis_window();
    let inv_norm = ola_norm(cfg, frames);
    let out_len = cfg.output_len(frames);
    let mut outs = vec![vec![0.0; out_len]; chans];
    let mut buf = vec![C64::default(); n];
    for l in 0..frames {
        let start = l * cfg.hop;
        let mut m = 0;
        while m < chans {
            let pair = m + 1 < chans;
            // Hermitian-symmetrize so the real parts of two frames share one inverse FFT.
            for k in 0..n {
                let kk = (n - k) % n;
                let a = (grid.get(l, k, m) + grid.get(l, kk, m).conj()) * 0.5;
                let b = if pair {
                    (grid.get(l, k, m + 1) + grid.get(l, kk, m + 1).conj()) * 0.5
                } else {
                    C64::default()
                };
                buf[k] = a + C64::new(0.0, 1.0) * b;
            }
            fft_in_place(&mut buf, true)?;
            for i in 0..n {
                outs[m][start + i] += buf[i].re * synth[i];
                if pair {
                    outs[m + 1][start + i] += buf[i].im * synth[i];
                }
            }
            m += 2;
        }
    }
    for out in outs.iter_mut() {
        for (v, s) in out.iter_mut().zip(&inv_norm) {
            *v *= s;
        }
    }
    Ok(outs)
}
