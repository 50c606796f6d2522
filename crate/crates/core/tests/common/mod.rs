#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtfgraph::linalg::{CMatrix, HermitianMatrix};
use rtfgraph::signal::C64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cmatrix(n: usize, rng: &mut ChaCha8Rng) -> CMatrix {
    CMatrix::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

pub fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix {
    HermitianMatrix::new(random_cmatrix(n, rng)).unwrap()
}

/// `A^H A + I`
pub fn random_pd(n: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix {
    let a = random_cmatrix(n, rng);
    HermitianMatrix::new(a.adjoint().matmul(&a).unwrap()).unwrap().loaded(1.0)
}

pub fn random_cvec(n: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
    (0..n).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
}

type Dense = Vec<Vec<C64>>;

fn to_dense(a: &HermitianMatrix) -> Dense {
    let n = a.dim();
    (0..n).map(|i| (0..n).map(|j| a[(i, j)]).collect()).collect()
}

fn mul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

fn adjoint(a: &Dense) -> Dense {
    let n = a.len();
    (0..n).map(|i| (0..n).map(|j| a[j][i].conj()).collect()).collect()
}

/// Cyclic complex Jacobi eigensolver: eigenvalues descending, eigenvectors as
/// columns. Independent of the library's Householder/QL route.
pub fn jacobi_evd(a: &HermitianMatrix) -> (Vec<f64>, Dense) {
    let n = a.dim();
    let mut m = to_dense(a);
    let mut v: Dense = (0..n)
        .map(|i| (0..n).map(|j| if i == j { C64::new(1.0, 0.0) } else { C64::default() }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j].norm_sqr())
            .sum();
        let total: f64 = m.iter().flatten().map(|c| c.norm_sqr()).sum();
        if off <= 1e-32 * total.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p][q];
                let mag = apq.norm();
                if mag < 1e-300 {
                    continue;
                }
                let phase = apq / mag;
                let tau = (m[q][q].re - m[p][p].re) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let mut u: Dense = (0..n)
                    .map(|i| (0..n).map(|j| if i == j { C64::new(1.0, 0.0) } else { C64::default() }).collect())
                    .collect();
                u[p][p] = C64::new(c, 0.0);
                u[p][q] = C64::new(s, 0.0);
                u[q][p] = -phase.conj() * s;
                u[q][q] = phase.conj() * c;
                m = mul(&adjoint(&u), &mul(&m, &u));
                v = mul(&v, &u);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].re.total_cmp(&m[i][i].re));
    let vals = order.iter().map(|&i| m[i][i].re).collect();
    let vecs = (0..n).map(|r| order.iter().map(|&c| v[r][c]).collect()).collect();
    (vals, vecs)
}

/// Top generalized eigenpair by symmetric whitening `B^-1/2 A B^-1/2`, both
/// decompositions done with [`jacobi_evd`].
pub fn whitened_gevd_oracle(a: &HermitianMatrix, b: &HermitianMatrix) -> (f64, Vec<C64>) {
    let n = a.dim();
    let (bl, bv) = jacobi_evd(b);
    // B^-1/2 = V diag(l^-1/2) V^H
    let inv_sqrt: Dense = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..n).map(|k| bv[i][k] * bv[j][k].conj() / bl[k].sqrt()).sum())
                .collect()
        })
        .collect();
    let c = mul(&inv_sqrt, &mul(&to_dense(a), &inv_sqrt));
    let cm = HermitianMatrix::new(CMatrix::from_vec(n, n, c.into_iter().flatten().collect()).unwrap()).unwrap();
    let (cl, cv) = jacobi_evd(&cm);
    let u: Vec<C64> = (0..n).map(|i| cv[i][0]).collect();
    let phi: Vec<C64> = (0..n).map(|i| (0..n).map(|k| inv_sqrt[i][k] * u[k]).sum()).collect();
    (cl[0], phi)
}

/// `|<x, y>| / (|x| |y|)`
pub fn alignment(x: &[C64], y: &[C64]) -> f64 {
    let dot: C64 = x.iter().zip(y).map(|(a, b)| a.conj() * b).sum();
    let nx: f64 = x.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    dot.norm() / (nx * ny)
}

/// Largest coordinate-wise relative error between an analytic gradient and
/// central differences of `f` at `x` over `coords`. Coordinates whose
/// gradient is below `floor * max|g|` are compared against that floor.
pub fn fd_max_rel_err(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    coords: &[usize],
    step: f64,
    floor: f64,
) -> f64 {
    let gmax = coords.iter().map(|&i| grad[i].abs()).fold(0.0, f64::max);
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for &i in coords {
        xp[i] = x[i] + step;
        let up = f(&xp);
        xp[i] = x[i] - step;
        let down = f(&xp);
        xp[i] = x[i];
        let fd = (up - down) / (2.0 * step);
        let scale = fd.abs().max(grad[i].abs()).max(floor * gmax).max(1e-300);
        worst = worst.max((fd - grad[i]).abs() / scale);
    }
    worst
}

pub mod toy {
    use rand::Rng;
    use rtfgraph::beamformer::NoiseFactors;
    use rtfgraph::objective::LossExample;
    use rtfgraph::room::Air;
    use rtfgraph::rtf::{class_covariance, rtf_from_airs, rtf_to_feature, FrameLabel, RtfFeature, LOADING};
    use rtfgraph::signal::{convolve_slices, stft, MultichannelSignal, Signal, StftConfig, WindowKind};

    pub const M: usize = 3;
    pub const REF: usize = 1;
    pub const K: usize = 64;
    pub const LU: usize = 8;
    pub const LC: usize = 16;

    pub fn cfg() -> StftConfig {
        StftConfig::new(K, K / 4, WindowKind::SqrtHann).unwrap()
    }

    /// Three microphones observing an amplitude-modulated noise source through
    /// short random filters, plus partly coherent sensor noise.
    pub fn example(seed: u64, len: usize) -> (LossExample, RtfFeature) {
        let mut rng = super::rng(seed);
        let src: Vec<f64> = (0..len)
            .map(|i| {
                let env = 0.6 + 0.4 * (2.0 * std::f64::consts::PI * i as f64 / 1500.0).sin();
                env * rng.random_range(-1.0..1.0)
            })
            .collect();
        let airs: Vec<Air> = (0..M)
            .map(|m| {
                let mut taps: Vec<f64> = (0..6).map(|_| 0.3 * rng.random_range(-1.0..1.0)).collect();
                taps[m] += 1.0;
                Air { taps, sample_rate: 16000 }
            })
            .collect();
        let clean: Vec<Vec<f64>> = airs.iter().map(|a| convolve_slices(&src, &a.taps)[..len].to_vec()).collect();
        let shared: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let noise: Vec<Vec<f64>> = (0..M)
            .map(|m| {
                (0..len)
                    .map(|i| 0.2 * rng.random_range(-1.0..1.0) + 0.15 * shared[(i + 3 * m) % len])
                    .collect()
            })
            .collect();
        let to_mc = |chans: Vec<Vec<f64>>| {
            MultichannelSignal::new(chans.into_iter().map(|c| Signal::new(c, 16000).unwrap()).collect(), REF).unwrap()
        };
        let noisy: Vec<Vec<f64>> = (0..M)
            .map(|m| clean[m].iter().zip(&noise[m]).map(|(a, b)| a + b).collect())
            .collect();
        let cfg = cfg();
        let noise_grid = stft(&to_mc(noise), &cfg).unwrap();
        let labels = vec![FrameLabel::NoiseOnly; noise_grid.frames()];
        let (phi_vv, _) = class_covariance(&noise_grid, &labels, FrameLabel::NoiseOnly).unwrap();
        let phi_vv: Vec<_> = phi_vv.into_iter().map(|p| { let d = LOADING * p.trace() / M as f64; p.loaded(d) }).collect();
        let oracle = rtf_to_feature(&rtf_from_airs(&airs, REF, K).unwrap(), LU, LC).unwrap();
        let grid = stft(&to_mc(noisy), &cfg).unwrap();
        let ex = LossExample::new(grid, NoiseFactors::new(&phi_vv).unwrap(), &clean[REF], oracle.clone()).unwrap();
        (ex, oracle)
    }
}
