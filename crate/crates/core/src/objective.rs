//! Training objectives evaluated on RTF features: the feature-to-beamformer
//! chain (feature -> spectrum -> MVDR -> beamformed STFT -> ISTFT) and its
//! reverse pass, plus the scalar losses built on top of it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::beamformer::{apply_backward, apply_beamformer, istft_backward, mvdr_backward, mvdr_weights_factored, BeamWeights, NoiseFactors};
use crate::error::{Error, Result};
use crate::metrics::{feature_mse_grad, sbf_grad, si_sdr, si_sdr_grad, soft_stoi_grad};
use crate::rtf::{feature_to_rtf, RtfFeature, RtfSpectrum};
use crate::signal::{fft_in_place, istft_raw, TfGrid, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sbf,
    Sisdr1,
    Sisdr2,
    Stoi,
    FeatureMse,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Sbf,
        Objective::Sisdr1,
        Objective::Sisdr2,
        Objective::Stoi,
        Objective::FeatureMse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Sbf => "sbf",
            Objective::Sisdr1 => "sisdr1",
            Objective::Sisdr2 => "sisdr2",
            Objective::Stoi => "stoi",
            Objective::FeatureMse => "feature_mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown loss '{s}'")))
    }

    pub fn maximize(self) -> bool {
        self != Objective::FeatureMse
    }
}

/// Scalar objective value with its optimization direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub maximize: bool,
}

impl LossValue {
    /// The quantity an optimizer minimizes.
    pub fn minimized(&self) -> f64 {
        if self.maximize {
            -self.value
        } else {
            self.value
        }
    }
}

/// Everything an objective needs besides the features under evaluation.
pub struct LossExample {
    /// STFT of the noisy microphone signals.
    pub noisy: TfGrid,
    pub noise: Arc<NoiseFactors>,
    /// Clean reverberant reference-microphone signal, ISTFT length.
    pub clean_ref: Vec<f64>,
    /// Clean features of the position.
    pub oracle: RtfFeature,
    /// Beamformer output steered by `oracle`.
    pub oracle_out: Vec<f64>,
}

impl LossExample {
    pub fn new(noisy: TfGrid, noise: impl Into<Arc<NoiseFactors>>, clean_ref: &[f64], oracle: RtfFeature) -> Result<Self> {
        let mut ex = Self::with_oracle_output(noisy, noise, clean_ref, oracle, Vec::new())?;
        ex.oracle_out = beamform_features(&ex.oracle, &ex)?.0;
        Ok(ex)
    }

    /// Reassembles an example whose oracle output is already known.
    pub fn with_oracle_output(
        noisy: TfGrid,
        noise: impl Into<Arc<NoiseFactors>>,
        clean_ref: &[f64],
        oracle: RtfFeature,
        oracle_out: Vec<f64>,
    ) -> Result<Self> {
        let len = noisy.config().output_len(noisy.frames());
        if clean_ref.len() < len {
            return Err(Error::TooShort {
                needed: len,
                got: clean_ref.len(),
            });
        }
        if !oracle_out.is_empty() && oracle_out.len() != len {
            return Err(Error::Shape(format!("oracle output has {} samples, expected {len}", oracle_out.len())));
        }
        Ok(Self {
            noisy,
            noise: noise.into(),
            clean_ref: clean_ref[..len].to_vec(),
            oracle,
            oracle_out,
        })
    }

    pub fn output_len(&self) -> usize {
        self.noisy.config().output_len(self.noisy.frames())
    }
}

/// Intermediate values the reverse pass needs.
pub struct ChainCache {
    pub spectrum: RtfSpectrum,
    pub weights: BeamWeights,
}

/// Beamformer output for steering features `f`.
pub fn beamform_features(f: &RtfFeature, ex: &LossExample) -> Result<(Vec<f64>, ChainCache)> {
    let spectrum = feature_to_rtf(f, ex.noisy.bins())?;
    let weights = mvdr_weights_factored(&spectrum, &ex.noise)?;
    let y = apply_beamformer(&weights, &ex.noisy)?;
    let out = istft_raw(&y)?.remove(0);
    Ok((out, ChainCache { spectrum, weights }))
}

/// Maps `dL/dy` over the beamformer output back to `dL/df`.
pub fn beamform_backward(cache: &ChainCache, ex: &LossExample, grad_y: &[f64], like: &RtfFeature) -> Result<Vec<f64>> {
    let grid = &ex.noisy;
    let g_out = istft_backward(grad_y, grid.config(), grid.frames())?;
    let g_w = apply_backward(&g_out, grid)?;
    let g_h = mvdr_backward(&cache.spectrum, &ex.noise, &cache.weights, &g_w)?;
    spectrum_to_feature_grad(&g_h, like, grid.bins())
}

/// Adjoint of `feature_to_rtf`: `G_t = Re(K * IDFT(G_h))`, read back at the
/// feature's lags.
pub fn spectrum_to_feature_grad(g_h: &[C64], like: &RtfFeature, bins: usize) -> Result<Vec<f64>> {
    let m_count = like.mics();
    if g_h.len() != bins * m_count {
        return Err(Error::Shape("spectrum gradient does not match feature layout".into()));
    }
    let d = like.dim();
    let lu = like.l_uncausal();
    let mut out = vec![0.0; like.rows() * d];
    let mut buf = vec![C64::default(); bins];
    for i in 0..like.rows() {
        let m = like.mic_of_row(i);
        for (k, v) in buf.iter_mut().enumerate() {
            *v = g_h[k * m_count + m];
        }
        fft_in_place(&mut buf, true)?;
        for j in 0..d {
            out[i * d + j] = buf[(j + bins - lu) % bins].re * bins as f64;
        }
    }
    Ok(out)
}

/// Objective value only.
pub fn evaluate(obj: Objective, ex: &LossExample, f: &RtfFeature) -> Result<LossValue> {
    let value = match obj {
        Objective::Sisdr1 => si_sdr(&ex.clean_ref, &beamform_features(f, ex)?.0)?,
        Objective::Sisdr2 => si_sdr(&ex.oracle_out, &beamform_features(f, ex)?.0)?,
        _ => return Ok(value_and_grad(obj, ex, f)?.0),
    };
    Ok(LossValue {
        value,
        maximize: obj.maximize(),
    })
}

/// Objective value and its gradient with respect to the features.
pub fn value_and_grad(obj: Objective, ex: &LossExample, f: &RtfFeature) -> Result<(LossValue, Vec<f64>)> {
    let (value, grad) = match obj {
        Objective::FeatureMse => feature_mse_grad(&ex.oracle, f)?,
        Objective::Sbf => sbf_grad(&ex.oracle, f, &ex.clean_ref)?,
        Objective::Sisdr1 | Objective::Sisdr2 | Objective::Stoi => {
            let (y, cache) = beamform_features(f, ex)?;
            let (value, g_y) = match obj {
                Objective::Sisdr1 => si_sdr_grad(&ex.clean_ref, &y)?,
                Objective::Sisdr2 => si_sdr_grad(&ex.oracle_out, &y)?,
                _ => soft_stoi_grad(&ex.clean_ref, &y, ex.noisy.sample_rate())?,
            };
            (value, beamform_backward(&cache, ex, &g_y, f)?)
        }
    };
    Ok((
        LossValue {
            value,
            maximize: obj.maximize(),
        },
        grad,
    ))
}
