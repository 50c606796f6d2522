//! Spatial covariance estimation, GEVD/EVD relative transfer functions, the
//! truncated time-domain RTF feature and the normalized projection
//! misalignment (NPM) score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, gevd_top_with_factor, CMatrix, HermitianMatrix};
use crate::room::Air;
use crate::signal::{fft_in_place, StftConfig, TfGrid, C64};
use crate::util::db_clamped;

pub const L_UNCAUSAL: usize = 128;
pub const L_CAUSAL: usize = 256;
/// Relative diagonal loading applied to noise covariances.
pub const LOADING: f64 = 1e-6;
/// `|(Phi_vv phi)_ref|` below this fraction of `|Phi_vv phi|` marks a bin degenerate.
const REF_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameLabel {
    Noisy,
    NoiseOnly,
    Discard,
}

/// Labels STFT frames from a sample activity mask. The mask is first
/// extended forward by `tail` samples to cover the reverberant decay; a frame
/// is noise-only below 10% active samples and noisy above 90%.
pub fn label_frames(active: &[bool], tail: usize, cfg: &StftConfig, frames: usize) -> Vec<FrameLabel> {
    let total = cfg.output_len(frames).max(active.len() + tail);
    let mut dilated = vec![false; total];
    let mut last_active: Option<usize> = None;
    for (i, d) in dilated.iter_mut().enumerate() {
        if active.get(i).copied().unwrap_or(false) {
            last_active = Some(i);
        }
        *d = last_active.is_some_and(|j| i - j <= tail);
    }
    let mut prefix = vec![0usize; total + 1];
    for i in 0..total {
        prefix[i + 1] = prefix[i] + dilated[i] as usize;
    }
    (0..frames)
        .map(|l| {
            let start = l * cfg.hop;
            let frac = (prefix[start + cfg.fft_len] - prefix[start]) as f64 / cfg.fft_len as f64;
            if frac < 0.1 {
                FrameLabel::NoiseOnly
            } else if frac > 0.9 {
                FrameLabel::Noisy
            } else {
                FrameLabel::Discard
            }
        })
        .collect()
}

/// Per-bin spatial covariances of the noisy (speech + noise) and noise-only
/// frames.
#[derive(Debug, Clone)]
pub struct CovariancePair {
    pub phi_rr: Vec<HermitianMatrix>,
    pub phi_vv: Vec<HermitianMatrix>,
    pub noisy_frames: usize,
    pub noise_frames: usize,
}

/// Mean outer product `r r^H` over the frames carrying `label`, per bin.
pub fn class_covariance(grid: &TfGrid, labels: &[FrameLabel], label: FrameLabel) -> Result<(Vec<HermitianMatrix>, usize)> {
    if labels.len() != grid.frames() {
        return Err(Error::Shape(format!(
            "{} labels for {} frames",
            labels.len(),
            grid.frames()
        )));
    }
    let frames: Vec<usize> = (0..labels.len()).filter(|l| labels[*l] == label).collect();
    if frames.is_empty() {
        return Err(Error::EmptyFrameClass(match label {
            FrameLabel::Noisy => "noisy",
            FrameLabel::NoiseOnly => "noise_only",
            FrameLabel::Discard => "discard",
        }));
    }
    let m = grid.channels();
    let scale = 1.0 / frames.len() as f64;
    let covs = (0..grid.bins())
        .into_par_iter()
        .map(|k| {
            let mut acc = vec![C64::default(); m * m];
            for &l in &frames {
                let r = grid.vector(l, k);
                for i in 0..m {
                    for j in i..m {
                        acc[i * m + j] += r[i] * r[j].conj();
                    }
                }
            }
            for i in 0..m {
                for j in 0..i {
                    acc[i * m + j] = acc[j * m + i].conj();
                }
            }
            acc.iter_mut().for_each(|v| *v *= scale);
            HermitianMatrix::new(CMatrix::from_vec(m, m, acc)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((covs, frames.len()))
}

/// `Phi_rr` over noisy frames and `Phi_vv` over noise-only frames, the latter
/// loaded by `1e-6 * trace / M`.
pub fn estimate_covariances(grid: &TfGrid, labels: &[FrameLabel]) -> Result<CovariancePair> {
    let (phi_rr, noisy_frames) = class_covariance(grid, labels, FrameLabel::Noisy)?;
    let (phi_vv, noise_frames) = class_covariance(grid, labels, FrameLabel::NoiseOnly)?;
    let m = grid.channels() as f64;
    let phi_vv = phi_vv
        .into_iter()
        .map(|p| {
            let delta = LOADING * p.trace() / m;
            // an all-zero bin still needs a positive-definite matrix
            p.loaded(if delta > 0.0 { delta } else { f64::MIN_POSITIVE.sqrt() })
        })
        .collect();
    Ok(CovariancePair {
        phi_rr,
        phi_vv,
        noisy_frames,
        noise_frames,
    })
}

/// Per-bin RTF vectors, bin-major, with `h_ref == 1` in every bin.
#[derive(Debug, Clone, PartialEq)]
pub struct RtfSpectrum {
    bins: usize,
    mics: usize,
    ref_index: usize,
    data: Vec<C64>,
    degenerate: Vec<bool>,
}

impl RtfSpectrum {
    /// Builds a spectrum from bin-major values; the reference entry is reset
    /// to exactly 1.
    pub fn new(bins: usize, mics: usize, ref_index: usize, mut data: Vec<C64>) -> Result<Self> {
        if data.len() != bins * mics {
            return Err(Error::Shape(format!(
                "{} RTF values for {bins} bins x {mics} mics",
                data.len()
            )));
        }
        if ref_index >= mics {
            return Err(Error::InvalidInput(format!("reference {ref_index} out of range")));
        }
        for k in 0..bins {
            data[k * mics + ref_index] = C64::new(1.0, 0.0);
        }
        Ok(Self {
            bins,
            mics,
            ref_index,
            data,
            degenerate: vec![false; bins],
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn mics(&self) -> usize {
        self.mics
    }

    pub fn ref_index(&self) -> usize {
        self.ref_index
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn vector(&self, k: usize) -> &[C64] {
        &self.data[k * self.mics..(k + 1) * self.mics]
    }

    pub fn get(&self, k: usize, m: usize) -> C64 {
        self.data[k * self.mics + m]
    }

    /// Values of one microphone across all bins.
    pub fn channel(&self, m: usize) -> Vec<C64> {
        (0..self.bins).map(|k| self.get(k, m)).collect()
    }

    /// Bins whose estimate was replaced by interpolation.
    pub fn degenerate(&self) -> &[bool] {
        &self.degenerate
    }
}

/// GEVD estimate: per bin the top eigenvector `phi` of `(Phi_rr, Phi_vv)`,
/// mapped to `Phi_vv phi / (Phi_vv phi)_ref`.
pub fn estimate_rtf_gevd(cov: &CovariancePair, ref_index: usize) -> Result<RtfSpectrum> {
    if cov.phi_rr.len() != cov.phi_vv.len() {
        return Err(Error::Shape("covariance lists differ in length".into()));
    }
    rtf_from_pencils(&cov.phi_rr, Some(&cov.phi_vv), ref_index)
}

/// EVD estimate from noiseless frames: the GEVD with `Phi_vv = I`.
pub fn estimate_rtf_clean(grid: &TfGrid, labels: &[FrameLabel], ref_index: usize) -> Result<RtfSpectrum> {
    let (phi_rr, _) = class_covariance(grid, labels, FrameLabel::Noisy)?;
    rtf_from_pencils(&phi_rr, None, ref_index)
}

/// Shared per-bin kernel; `phi_vv == None` means the identity.
pub fn rtf_from_pencils(
    phi_rr: &[HermitianMatrix],
    phi_vv: Option<&[HermitianMatrix]>,
    ref_index: usize,
) -> Result<RtfSpectrum> {
    let bins = phi_rr.len();
    if bins == 0 {
        return Err(Error::InvalidInput("no frequency bins".into()));
    }
    let m = phi_rr[0].dim();
    if ref_index >= m {
        return Err(Error::InvalidInput(format!("reference {ref_index} out of range for {m} mics")));
    }
    let identity = HermitianMatrix::identity(m);
    let per_bin: Vec<Option<Vec<C64>>> = (0..bins)
        .into_par_iter()
        .map(|k| {
            let b = phi_vv.map_or(&identity, |v| &v[k]);
            let l = cholesky(b)?;
            let (_, phi) = gevd_top_with_factor(&phi_rr[k], &l)?;
            let v = b.matvec(&phi);
            let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            let r = v[ref_index];
            if !(r.norm() >= REF_EPS * norm) || norm == 0.0 {
                return Ok(None);
            }
            Ok(Some(v.iter().map(|c| c / r).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    let degenerate: Vec<bool> = per_bin.iter().map(Option::is_none).collect();
    let valid: Vec<usize> = (0..bins).filter(|k| !degenerate[*k]).collect();
    if valid.is_empty() {
        return Err(Error::ZeroReference);
    }
    let mut data = vec![C64::default(); bins * m];
    for k in 0..bins {
        let vec = match &per_bin[k] {
            Some(v) => v.clone(),
            None => interpolate_bin(&per_bin, &valid, k),
        };
        data[k * m..(k + 1) * m].copy_from_slice(&vec);
    }
    let mut out = RtfSpectrum::new(bins, m, ref_index, data)?;
    out.degenerate = degenerate;
    Ok(out)
}

/// Linear interpolation between the nearest valid bins on either side; the
/// nearest valid bin is copied at the spectrum edges.
fn interpolate_bin(per_bin: &[Option<Vec<C64>>], valid: &[usize], k: usize) -> Vec<C64> {
    let pos = valid.partition_point(|&v| v < k);
    let below = pos.checked_sub(1).map(|i| valid[i]);
    let above = valid.get(pos).copied();
    match (below, above) {
        (Some(a), Some(b)) => {
            let t = (k - a) as f64 / (b - a) as f64;
            let va = per_bin[a].as_ref().expect("valid");
            let vb = per_bin[b].as_ref().expect("valid");
            va.iter().zip(vb).map(|(x, y)| x * (1.0 - t) + y * t).collect()
        }
        (Some(a), None) => per_bin[a].clone().expect("valid"),
        (None, Some(b)) => per_bin[b].clone().expect("valid"),
        (None, None) => unreachable!("at least one valid bin"),
    }
}

/// Ground-truth RTF from AIRs: ratio of each AIR's DTFT sampled at the `bins`
/// bin frequencies to the reference AIR's.
pub fn rtf_from_airs(airs: &[Air], ref_index: usize, bins: usize) -> Result<RtfSpectrum> {
    if !bins.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(bins));
    }
    let m = airs.len();
    if ref_index >= m {
        return Err(Error::InvalidInput(format!("reference {ref_index} out of range for {m} AIRs")));
    }
    // sampling the DTFT at K points equals the FFT of the AIR folded modulo K
    let spectra: Vec<Vec<C64>> = airs
        .iter()
        .map(|a| {
            let mut buf = vec![C64::default(); bins];
            for (i, v) in a.taps.iter().enumerate() {
                buf[i % bins].re += v;
            }
            fft_in_place(&mut buf, false)?;
            Ok(buf)
        })
        .collect::<Result<_>>()?;
    let per_bin: Vec<Option<Vec<C64>>> = (0..bins)
        .map(|k| {
            let r = spectra[ref_index][k];
            let norm = spectra.iter().map(|s| s[k].norm_sqr()).sum::<f64>().sqrt();
            if r.norm() < REF_EPS * norm || norm == 0.0 {
                None
            } else {
                Some(spectra.iter().map(|s| s[k] / r).collect())
            }
        })
        .collect();
    let valid: Vec<usize> = (0..bins).filter(|k| per_bin[*k].is_some()).collect();
    if valid.is_empty() {
        return Err(Error::ZeroReference);
    }
    let mut data = vec![C64::default(); bins * m];
    for k in 0..bins {
        let v = per_bin[k].clone().unwrap_or_else(|| interpolate_bin(&per_bin, &valid, k));
        data[k * m..(k + 1) * m].copy_from_slice(&v);
    }
    let mut out = RtfSpectrum::new(bins, m, ref_index, data)?;
    out.degenerate = per_bin.iter().map(Option::is_none).collect();
    Ok(out)
}

/// Truncated time-domain RTFs of the non-reference microphones, one row of
/// `d = l_uncausal + l_causal` taps each. Row `i` holds the wrapped
/// non-causal tail `t[K-l_uncausal..K]` followed by `t[0..l_causal]`, so lag
/// zero sits at index `l_uncausal`.
#[derive(Debug, Clone, PartialEq)]
pub struct RtfFeature {
    l_uncausal: usize,
    l_causal: usize,
    mics: usize,
    ref_index: usize,
    data: Vec<f64>,
}

impl RtfFeature {
    pub fn new(l_uncausal: usize, l_causal: usize, mics: usize, ref_index: usize, data: Vec<f64>) -> Result<Self> {
        if mics < 2 || ref_index >= mics {
            return Err(Error::InvalidInput(format!("bad array: {mics} mics, reference {ref_index}")));
        }
        let d = l_uncausal + l_causal;
        if d == 0 || data.len() != (mics - 1) * d {
            return Err(Error::Shape(format!(
                "{} feature values for {} rows of {d}",
                data.len(),
                mics - 1
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self {
            l_uncausal,
            l_causal,
            mics,
            ref_index,
            data,
        })
    }

    pub fn zeros(l_uncausal: usize, l_causal: usize, mics: usize, ref_index: usize) -> Result<Self> {
        Self::new(l_uncausal, l_causal, mics, ref_index, vec![0.0; (mics - 1) * (l_uncausal + l_causal)])
    }

    pub fn dim(&self) -> usize {
        self.l_uncausal + self.l_causal
    }

    pub fn l_uncausal(&self) -> usize {
        self.l_uncausal
    }

    pub fn l_causal(&self) -> usize {
        self.l_causal
    }

    pub fn mics(&self) -> usize {
        self.mics
    }

    pub fn ref_index(&self) -> usize {
        self.ref_index
    }

    pub fn rows(&self) -> usize {
        self.mics - 1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Microphone index of feature row `i`.
    pub fn mic_of_row(&self, i: usize) -> usize {
        if i < self.ref_index {
            i
        } else {
            i + 1
        }
    }
}

pub fn rtf_to_feature(h: &RtfSpectrum, l_uncausal: usize, l_causal: usize) -> Result<RtfFeature> {
    let k = h.bins();
    let d = l_uncausal + l_causal;
    if k < d {
        return Err(Error::Shape(format!("{k} bins cannot hold a {d}-tap feature")));
    }
    let mut data = Vec::with_capacity((h.mics() - 1) * d);
    let mut buf = vec![C64::default(); k];
    for m in (0..h.mics()).filter(|m| *m != h.ref_index()) {
        for (b, v) in buf.iter_mut().enumerate() {
            *v = h.get(b, m);
        }
        fft_in_place(&mut buf, true)?;
        data.extend(buf[k - l_uncausal..].iter().map(|c| c.re));
        data.extend(buf[..l_causal].iter().map(|c| c.re));
    }
    RtfFeature::new(l_uncausal, l_causal, h.mics(), h.ref_index(), data)
}

/// Places a feature row back on a `bins`-sample circular time axis.
pub fn feature_row_to_time(row: &[f64], l_uncausal: usize, bins: usize) -> Vec<f64> {
    let mut t = vec![0.0; bins];
    for (i, v) in row.iter().enumerate() {
        let idx = (i + bins - l_uncausal) % bins;
        t[idx] = *v;
    }
    t
}

pub fn feature_to_rtf(f: &RtfFeature, bins: usize) -> Result<RtfSpectrum> {
    if bins < f.dim() || !bins.is_power_of_two() {
        return Err(Error::Shape(format!("{bins} bins cannot hold a {}-tap feature", f.dim())));
    }
    let m_count = f.mics();
    let mut data = vec![C64::default(); bins * m_count];
    for i in 0..f.rows() {
        let m = f.mic_of_row(i);
        let t = feature_row_to_time(f.row(i), f.l_uncausal(), bins);
        let mut buf: Vec<C64> = t.iter().map(|v| C64::new(*v, 0.0)).collect();
        fft_in_place(&mut buf, false)?;
        for (k, v) in buf.iter().enumerate() {
            data[k * m_count + m] = *v;
        }
    }
    RtfSpectrum::new(bins, m_count, f.ref_index(), data)
}

/// `20 log10(|h - (<h_est, h> / <h_est, h_est>) h_est| / |h|)`, clamped to
/// +-150 dB. An all-zero estimate scores 0 dB.
pub fn npm(h_est: &[f64], h_true: &[f64]) -> Result<f64> {
    if h_est.len() != h_true.len() {
        return Err(Error::Shape(format!("{} vs {} taps", h_est.len(), h_true.len())));
    }
    let tt: f64 = h_true.iter().map(|v| v * v).sum();
    if tt <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let ee: f64 = h_est.iter().map(|v| v * v).sum();
    let et: f64 = h_est.iter().zip(h_true).map(|(a, b)| a * b).sum();
    let c = if ee > 0.0 { et / ee } else { 0.0 };
    let err: f64 = h_true.iter().zip(h_est).map(|(t, e)| (t - c * e).powi(2)).sum();
    Ok(db_clamped(err, tt))
}

/// Complex NPM with the Hermitian inner product.
pub fn npm_complex(h_est: &[C64], h_true: &[C64]) -> Result<f64> {
    if h_est.len() != h_true.len() {
        return Err(Error::Shape(format!("{} vs {} values", h_est.len(), h_true.len())));
    }
    let tt: f64 = h_true.iter().map(|v| v.norm_sqr()).sum();
    if tt <= 0.0 {
        return Err(Error::ZeroReference);
    }
    let ee: f64 = h_est.iter().map(|v| v.norm_sqr()).sum();
    let et: C64 = h_est.iter().zip(h_true).map(|(a, b)| a.conj() * b).sum();
    let c = if ee > 0.0 { et / ee } else { C64::default() };
    let err: f64 = h_true.iter().zip(h_est).map(|(t, e)| (t - c * e).norm_sqr()).sum();
    Ok(db_clamped(err, tt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpmReport {
    pub per_mic: Vec<f64>,
    pub mean: f64,
}

/// Row-wise NPM between two feature sets.
pub fn npm_features(est: &RtfFeature, truth: &RtfFeature) -> Result<NpmReport> {
    if est.dim() != truth.dim() || est.rows() != truth.rows() {
        return Err(Error::Shape("feature sets differ in shape".into()));
    }
    let per_mic = (0..est.rows())
        .map(|i| npm(est.row(i), truth.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_mic.iter().sum::<f64>() / per_mic.len() as f64;
    Ok(NpmReport { per_mic, mean })
}

/// Per-microphone NPM between two spectra over all bins (reference excluded).
pub fn npm_spectra(est: &RtfSpectrum, truth: &RtfSpectrum) -> Result<NpmReport> {
    if est.bins() != truth.bins() || est.mics() != truth.mics() {
        return Err(Error::Shape("spectra differ in shape".into()));
    }
    let per_mic = (0..est.mics())
        .filter(|m| *m != est.ref_index())
        .map(|m| npm_complex(&est.channel(m), &truth.channel(m)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_mic.iter().sum::<f64>() / per_mic.len() as f64;
    Ok(NpmReport { per_mic, mean })
}
