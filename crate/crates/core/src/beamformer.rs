//! RTF-steered MVDR weights, their application to STFT grids, shadow
//! filtering of mixture components, and the reverse-mode rules that carry
//! gradients from a beamformer output back to the steering vector.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, CMatrix, HermitianMatrix};
use crate::rtf::RtfSpectrum;
use crate::signal::{istft, fft_in_place, Signal, StftConfig, TfGrid, C64};

/// `|h^H Phi_vv^-1 h|` below this falls back to the reference selector.
pub const DEGENERATE_Q: f64 = 1e-12;

/// Per-bin complex weight vectors plus a mask of bins that fell back to the
/// reference-channel selector.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamWeights {
    bins: usize,
    mics: usize,
    ref_index: usize,
    data: Vec<C64>,
    fallback: Vec<bool>,
}

impl BeamWeights {
    pub fn new(bins: usize, mics: usize, ref_index: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != bins * mics || ref_index >= mics {
            return Err(Error::Shape(format!("{} weights for {bins} bins x {mics} mics", data.len())));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidInput("non-finite weight".into()));
        }
        Ok(Self {
            bins,
            mics,
            ref_index,
            data,
            fallback: vec![false; bins],
        })
    }

    /// Reference-channel passthrough in every bin.
    pub fn reference_selector(bins: usize, mics: usize, ref_index: usize) -> Result<Self> {
        let mut data = vec![C64::default(); bins * mics];
        for k in 0..bins {
            data[k * mics + ref_index] = C64::new(1.0, 0.0);
        }
        Self::new(bins, mics, ref_index, data)
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

    pub fn fallback(&self) -> &[bool] {
        &self.fallback
    }
}

/// Cholesky factors of the per-bin noise covariances, reusable across many
/// steering vectors.
#[derive(Debug, Clone)]
pub struct NoiseFactors {
    factors: Vec<CMatrix>,
}

impl NoiseFactors {
    pub fn new(phi_vv: &[HermitianMatrix]) -> Result<Self> {
        let factors = phi_vv.par_iter().map(cholesky).collect::<Result<Vec<_>>>()?;
        Ok(Self { factors })
    }

    pub fn bins(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, k: usize) -> &CMatrix {
        &self.factors[k]
    }
}

fn dot_h(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// `w = Phi_vv^-1 h / (h^H Phi_vv^-1 h)` per bin through a Cholesky solve.
pub fn mvdr_weights(h: &RtfSpectrum, phi_vv: &[HermitianMatrix]) -> Result<BeamWeights> {
    mvdr_weights_factored(h, &NoiseFactors::new(phi_vv)?)
}

pub fn mvdr_weights_factored(h: &RtfSpectrum, noise: &NoiseFactors) -> Result<BeamWeights> {
    if noise.bins() != h.bins() {
        return Err(Error::Shape(format!("{} covariances for {} bins", noise.bins(), h.bins())));
    }
    let m = h.mics();
    if noise.bins() > 0 && noise.factor(0).rows() != m {
        return Err(Error::Shape(format!(
            "{}x{} covariance for {m} mics",
            noise.factor(0).rows(),
            noise.factor(0).rows()
        )));
    }
    let per_bin: Vec<Option<Vec<C64>>> = (0..h.bins())
        .into_par_iter()
        .map(|k| {
            let hk = h.vector(k);
            let u = cholesky_solve(noise.factor(k), hk);
            let q = dot_h(hk, &u);
            let ok = q.norm() >= DEGENERATE_Q && u.iter().all(|c| c.re.is_finite() && c.im.is_finite());
            ok.then(|| u.iter().map(|c| c / q).collect())
        })
        .collect();
    let mut data = vec![C64::default(); h.bins() * m];
    let mut fallback = vec![false; h.bins()];
    for (k, w) in per_bin.into_iter().enumerate() {
        match w {
            Some(w) => data[k * m..(k + 1) * m].copy_from_slice(&w),
            None => {
                data[k * m + h.ref_index()] = C64::new(1.0, 0.0);
                fallback[k] = true;
            }
        }
    }
    let mut out = BeamWeights::new(h.bins(), m, h.ref_index(), data)?;
    out.fallback = fallback;
    Ok(out)
}

/// `y(l,k) = w(k)^H r(l,k)` as a single-channel grid.
pub fn apply_beamformer(w: &BeamWeights, grid: &TfGrid) -> Result<TfGrid> {
    if w.bins() != grid.bins() || w.mics() != grid.channels() {
        return Err(Error::Shape(format!(
            "weights {}x{} vs grid {} bins x {} channels",
            w.bins(),
            w.mics(),
            grid.bins(),
            grid.channels()
        )));
    }
    let mut out = TfGrid::zeros(grid.frames(), 1, *grid.config(), grid.sample_rate());
    for l in 0..grid.frames() {
        for k in 0..grid.bins() {
            out.set(l, k, 0, dot_h(w.vector(k), grid.vector(l, k)));
        }
    }
    Ok(out)
}

/// Beamforms the clean and noise components separately and resynthesizes
/// both, giving the desired and residual-noise parts of the output.
pub fn shadow_filter(w: &BeamWeights, clean: &TfGrid, noise: &TfGrid) -> Result<(Signal, Signal)> {
    clean.check_compatible(noise)?;
    let cfg = clean.config();
    let s = istft(&apply_beamformer(w, clean)?, cfg)?.remove(0);
    let v = istft(&apply_beamformer(w, noise)?, cfg)?.remove(0);
    Ok((s, v))
}

/// Adjoint of the single-channel ISTFT: maps `dL/dy` over the output samples
/// to the complex gradient `dL/dRe Y + i dL/dIm Y` of every grid cell.
pub fn istft_backward(grad_y: &[f64], cfg: &StftConfig, frames: usize) -> Result<Vec<C64>> {
    let n = cfg.fft_len;
    if grad_y.len() != cfg.output_len(frames) {
        return Err(Error::Shape(format!(
            "{} output gradients for {frames} frames",
            grad_y.len()
        )));
    }
    let synth = cfg.synthesis_window();
    let inv_norm = crate::signal::ola_norm(cfg, frames);
    let mut out = vec![C64::default(); frames * n];
    let mut buf = vec![C64::default(); n];
    let scale = 1.0 / n as f64;
    for l in 0..frames {
        let start = l * cfg.hop;
        for i in 0..n {
            buf[i] = C64::new(grad_y[start + i] * inv_norm[start + i] * synth[i], 0.0);
        }
        fft_in_place(&mut buf, false)?;
        for (o, b) in out[l * n..(l + 1) * n].iter_mut().zip(&buf) {
            *o = b * scale;
        }
    }
    Ok(out)
}

/// `dL/dw(k) = sum_l conj(G_y(l,k)) r(l,k)` for `y = w^H r`.
pub fn apply_backward(grad_out: &[C64], grid: &TfGrid) -> Result<Vec<C64>> {
    let (frames, bins, m) = (grid.frames(), grid.bins(), grid.channels());
    if grad_out.len() != frames * bins {
        return Err(Error::Shape("output gradient does not match grid".into()));
    }
    let mut g = vec![C64::default(); bins * m];
    for l in 0..frames {
        for k in 0..bins {
            let gy = grad_out[l * bins + k].conj();
            let r = grid.vector(l, k);
            for (acc, rv) in g[k * m..(k + 1) * m].iter_mut().zip(r) {
                *acc += gy * rv;
            }
        }
    }
    Ok(g)
}

/// Gradient with respect to the steering vector through the MVDR solve.
/// With `u = Phi^-1 h` and `q = h^H u`:
/// `G_h = Phi^-1 G_w / q - 2 Re(G_w^H u) / q^2 * u`. Fallback bins and the
/// fixed reference entry receive zero.
pub fn mvdr_backward(h: &RtfSpectrum, noise: &NoiseFactors, w: &BeamWeights, grad_w: &[C64]) -> Result<Vec<C64>> {
    let m = h.mics();
    if grad_w.len() != h.bins() * m || noise.bins() != h.bins() {
        return Err(Error::Shape("weight gradient does not match spectrum".into()));
    }
    let out: Vec<Vec<C64>> = (0..h.bins())
        .into_par_iter()
        .map(|k| {
            if w.fallback()[k] {
                return vec![C64::default(); m];
            }
            let hk = h.vector(k);
            let gw = &grad_w[k * m..(k + 1) * m];
            let u = cholesky_solve(noise.factor(k), hk);
            let q = dot_h(hk, &u).re;
            let a = cholesky_solve(noise.factor(k), gw);
            let c = 2.0 * dot_h(gw, &u).re / (q * q);
            let mut g: Vec<C64> = a.iter().zip(&u).map(|(a, u)| a / q - u * c).collect();
            g[h.ref_index()] = C64::default();
            g
        })
        .collect();
    Ok(out.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::WindowKind;

    fn spectrum(h: &[C64], ref_index: usize) -> RtfSpectrum {
        RtfSpectrum::new(1, h.len(), ref_index, h.to_vec()).unwrap()
    }

    #[test]
    fn unit_reference_with_identity() {
        let h = spectrum(&[C64::new(0.0, 0.0), C64::new(1.0, 0.0), C64::new(0.0, 0.0)], 1);
        let w = mvdr_weights(&h, &[HermitianMatrix::identity(3)]).unwrap();
        assert_eq!(w.vector(0), &[C64::default(), C64::new(1.0, 0.0), C64::default()]);
    }

    #[test]
    fn scaled_identity_gives_matched_filter() {
        let hv = [C64::new(1.0, 0.0), C64::new(0.3, -0.4), C64::new(-0.2, 0.9)];
        let h = spectrum(&hv, 0);
        let energy: f64 = hv.iter().map(|c| c.norm_sqr()).sum();
        for sigma2 in [1e-3, 1.0, 250.0] {
            let w = mvdr_weights(&h, &[HermitianMatrix::identity(3).scaled(sigma2)]).unwrap();
            for (a, b) in w.vector(0).iter().zip(&hv) {
                assert!((a - b / energy).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_steering_falls_back() {
        let h = RtfSpectrum::new(2, 2, 0, vec![C64::new(1.0, 0.0), C64::new(0.5, 0.0), C64::new(1.0, 0.0), C64::new(0.2, 0.1)])
            .unwrap();
        // an enormous noise covariance drives q below the threshold
        let big = HermitianMatrix::identity(2).scaled(1e14);
        let w = mvdr_weights(&h, &[HermitianMatrix::identity(2), big]).unwrap();
        assert_eq!(w.fallback(), &[false, true]);
        assert_eq!(w.vector(1), &[C64::new(1.0, 0.0), C64::default()]);
    }

    #[test]
    fn reference_selector_passes_reference() {
        let cfg = StftConfig::new(8, 4, WindowKind::SqrtHann).unwrap();
        let data: Vec<C64> = (0..3 * 8 * 2).map(|i| C64::new(i as f64, -(i as f64) * 0.5)).collect();
        let grid = TfGrid::from_data(3, 2, data, cfg, 16000).unwrap();
        let w = BeamWeights::reference_selector(8, 2, 1).unwrap();
        let y = apply_beamformer(&w, &grid).unwrap();
        for l in 0..3 {
            for k in 0..8 {
                assert_eq!(y.get(l, k, 0), grid.get(l, k, 1));
            }
        }
    }
}
