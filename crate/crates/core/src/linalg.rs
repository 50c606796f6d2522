//! Dense complex Hermitian linear algebra for small matrices (M <= 64):
//! Cholesky factorization, Hermitian eigendecomposition, the top generalized
//! eigenpair of a Hermitian pencil, and positive-definite solves.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::signal::C64;

const MAX_QL_ITERATIONS: usize = 60;

/// Row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::default(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidInput("non-finite matrix entry".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = C64::new(*v, 0.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn adjoint(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn matmul(&self, other: &CMatrix) -> Result<CMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = CMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Maximum absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Square matrix with `A == A^H` enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(CMatrix);

impl HermitianMatrix {
    /// Symmetrizes `m` as `(m + m^H) / 2`; the diagonal becomes exactly real.
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(Error::Shape(format!(
                "hermitian matrix must be square, got {}x{}",
                m.rows, m.cols
            )));
        }
        let n = m.rows;
        let mut out = m;
        for i in 0..n {
            out[(i, i)] = C64::new(out[(i, i)].re, 0.0);
            for j in i + 1..n {
                let v = (out[(i, j)] + out[(j, i)].conj()) * 0.5;
                out[(i, j)] = v;
                out[(j, i)] = v.conj();
            }
        }
        Ok(Self(out))
    }

    pub fn identity(n: usize) -> Self {
        Self(CMatrix::identity(n))
    }

    pub fn diag(values: &[f64]) -> Self {
        Self(CMatrix::diag(values))
    }

    /// `scale * x x^H`.
    pub fn outer(x: &[C64], scale: f64) -> Self {
        let n = x.len();
        Self::new(CMatrix::from_fn(n, n, |i, j| x[i] * x[j].conj() * scale))
            .expect("square")
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.scaled(c))
    }

    pub fn add(&self, other: &HermitianMatrix) -> Self {
        Self(CMatrix {
            rows: self.0.rows,
            cols: self.0.cols,
            data: self.0.data.iter().zip(&other.0.data).map(|(a, b)| a + b).collect(),
        })
    }

    /// Adds `delta` to every diagonal entry.
    pub fn loaded(&self, delta: f64) -> Self {
        let mut m = self.0.clone();
        for i in 0..self.dim() {
            m[(i, i)] += delta;
        }
        Self(m)
    }

    pub fn matvec(&self, x: &[C64]) -> Vec<C64> {
        self.0.matvec(x)
    }

    /// `x^H A x` (real for Hermitian A).
    pub fn quadratic_form(&self, x: &[C64]) -> f64 {
        let ax = self.matvec(x);
        x.iter().zip(&ax).map(|(a, b)| a.conj() * b).sum::<C64>().re
    }
}

impl Index<(usize, usize)> for HermitianMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, idx: (usize, usize)) -> &C64 {
        &self.0[idx]
    }
}

/// Lower-triangular Cholesky factor `L` with `L L^H == B`.
pub fn cholesky(b: &HermitianMatrix) -> Result<CMatrix> {
    let n = b.dim();
    let scale = (0..n).map(|i| b[(i, i)].re.abs()).fold(0.0, f64::max);
    let tol = scale * 1e-14 * n as f64;
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = b[(j, j)].re;
        for k in 0..j {
            pivot -= l[(j, k)].norm_sqr();
        }
        if !(pivot > tol) {
            return Err(Error::NotPositiveDefinite {
                index: j,
                value: pivot,
            });
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = C64::new(ljj, 0.0);
        for i in j + 1..n {
            let mut s = b[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_substitute(l: &CMatrix, b: &[C64]) -> Vec<C64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Solves `L^H x = y` for lower-triangular `L`.
pub fn back_substitute_adjoint(l: &CMatrix, y: &[C64]) -> Vec<C64> {
    let n = l.rows();
    let mut x = y.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)].conj() * x[k];
        }
        x[i] = s / l[(i, i)].conj();
    }
    x
}

/// Solves `A x = b` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &CMatrix, b: &[C64]) -> Vec<C64> {
    back_substitute_adjoint(l, &forward_substitute(l, b))
}

/// Solves `A x = b` for positive-definite Hermitian `A`.
pub fn solve_hermitian(a: &HermitianMatrix, b: &[C64]) -> Result<Vec<C64>> {
    if b.len() != a.dim() {
        return Err(Error::Shape(format!(
            "rhs of length {} for {}x{} system",
            b.len(),
            a.dim(),
            a.dim()
        )));
    }
    let l = cholesky(a)?;
    Ok(cholesky_solve(&l, b))
}

/// Eigenvalues in descending order with matching orthonormal eigenvector
/// columns.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

/// Hermitian eigendecomposition: Householder reduction to a real symmetric
/// tridiagonal matrix followed by implicit-shift QL iterations.
pub fn hermitian_evd(a: &HermitianMatrix) -> Result<Eigen> {
    let n = a.dim();
    if n == 0 {
        return Ok(Eigen {
            values: vec![],
            vectors: CMatrix::zeros(0, 0),
        });
    }
    let mut t = a.as_matrix().clone();
    let mut q = CMatrix::identity(n);

    // Householder reduction: t <- H t H, q <- q H
    for k in 0..n.saturating_sub(2) {
        let x: Vec<C64> = (k + 1..n).map(|i| t[(i, k)]).collect();
        let xnorm = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        if xnorm == 0.0 {
            continue;
        }
        let phase = if x[0].norm() > 0.0 {
            x[0] / x[0].norm()
        } else {
            C64::new(1.0, 0.0)
        };
        let alpha = -phase * xnorm;
        let mut v = vec![C64::default(); n];
        for (i, xi) in x.iter().enumerate() {
            v[k + 1 + i] = *xi;
        }
        v[k + 1] -= alpha;
        let vnorm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if vnorm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|c| *c /= vnorm);
        apply_householder_left(&mut t, &v);
        apply_householder_right(&mut t, &v);
        apply_householder_right(&mut q, &v);
        // clean the reduced column/row
        for i in k + 2..n {
            t[(i, k)] = C64::default();
            t[(k, i)] = C64::default();
        }
        t[(k + 1, k)] = alpha;
        t[(k, k + 1)] = alpha.conj();
    }

    // Diagonal phase scaling makes the sub-diagonal real and non-negative.
    let mut phases = vec![C64::new(1.0, 0.0); n];
    let mut diag: Vec<f64> = (0..n).map(|i| t[(i, i)].re).collect();
    let mut off = vec![0.0; n];
    for j in 0..n - 1 {
        let e = t[(j + 1, j)];
        let mag = e.norm();
        off[j] = mag;
        phases[j + 1] = if mag > 0.0 {
            phases[j] * e / mag
        } else {
            phases[j]
        };
    }

    let mut z = vec![vec![0.0; n]; n];
    for (i, row) in z.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    tridiagonal_ql(&mut diag, &mut off, &mut z)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));

    // V = Q D Z
    let mut vectors = CMatrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            let mut s = C64::default();
            for k in 0..n {
                s += q[(r, k)] * phases[k] * z[k][src];
            }
            vectors[(r, col)] = s;
        }
    }
    Ok(Eigen {
        values: order.iter().map(|&i| diag[i]).collect(),
        vectors,
    })
}

/// `m <- (I - 2 v v^H) m`
fn apply_householder_left(m: &mut CMatrix, v: &[C64]) {
    let n = m.rows();
    for j in 0..m.cols() {
        let mut s = C64::default();
        for i in 0..n {
            s += v[i].conj() * m[(i, j)];
        }
        if s == C64::default() {
            continue;
        }
        for i in 0..n {
            m[(i, j)] -= v[i] * s * 2.0;
        }
    }
}

/// `m <- m (I - 2 v v^H)`
fn apply_householder_right(m: &mut CMatrix, v: &[C64]) {
    let cols = m.cols();
    for i in 0..m.rows() {
        let mut s = C64::default();
        for j in 0..cols {
            s += m[(i, j)] * v[j];
        }
        if s == C64::default() {
            continue;
        }
        for j in 0..cols {
            m[(i, j)] -= s * v[j].conj() * 2.0;
        }
    }
}

/// Implicit-shift QL on a symmetric tridiagonal matrix with diagonal `d` and
/// sub-diagonal `e` (`e[i]` couples rows i and i+1). Eigenvectors accumulate
/// into the columns of `z`.
fn tridiagonal_ql(d: &mut [f64], e: &mut [f64], z: &mut [Vec<f64>]) -> Result<()> {
    let n = d.len();
    if n > 0 {
        e[n - 1] = 0.0;
    }
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > MAX_QL_ITERATIONS {
                return Err(Error::NoConvergence(MAX_QL_ITERATIONS));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut underflow = false;
            let mut i = m;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for row in z.iter_mut() {
                    let f = row[i + 1];
                    row[i + 1] = s * row[i] + c * f;
                    row[i] = c * row[i] - s * f;
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Largest generalized eigenvalue of the pencil `(A, B)` and its eigenvector,
/// `A phi = mu B phi`, via Cholesky whitening of `B`. The eigenvector has unit
/// norm and its largest-magnitude entry is real and positive.
pub fn gevd_top(a: &HermitianMatrix, b: &HermitianMatrix) -> Result<(f64, Vec<C64>)> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "pencil of {}x{} and {}x{}",
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    let l = cholesky(b)?;
    gevd_top_with_factor(a, &l)
}

/// [`gevd_top`] with a precomputed Cholesky factor of `B`.
pub fn gevd_top_with_factor(a: &HermitianMatrix, l: &CMatrix) -> Result<(f64, Vec<C64>)> {
    let n = a.dim();
    // C = L^-1 A L^-H, built column by column
    let mut y = CMatrix::zeros(n, n);
    for j in 0..n {
        let col = forward_substitute(l, &a.as_matrix().column(j));
        for i in 0..n {
            y[(i, j)] = col[i];
        }
    }
    // C = (L^-1 (L^-1 A)^H) = L^-1 A^H L^-H = L^-1 A L^-H
    let yh = y.adjoint();
    let mut c = CMatrix::zeros(n, n);
    for j in 0..n {
        let col = forward_substitute(l, &yh.column(j));
        for i in 0..n {
            c[(i, j)] = col[i];
        }
    }
    let eig = hermitian_evd(&HermitianMatrix::new(c)?)?;
    let u = eig.vectors.column(0);
    let phi = back_substitute_adjoint(l, &u);
    Ok((eig.values[0], normalize_phase(phi)))
}

/// Unit-norm copy of `v` whose largest-magnitude entry is real positive.
pub fn normalize_phase(mut v: Vec<C64>) -> Vec<C64> {
    let norm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    let mut best = 0;
    for (i, c) in v.iter().enumerate() {
        if c.norm() > v[best].norm() * (1.0 + 1e-12) {
            best = i;
        }
    }
    let rot = v[best].conj() / v[best].norm() / norm;
    v.iter_mut().for_each(|c| *c *= rot);
    v
}
