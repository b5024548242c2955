//! Dense symmetric linear algebra and tensor mode products.
//!
//! Every Kronecker-structured fast path in this crate is built from two
//! primitives defined here: the cyclic Jacobi eigensolver [`sym_eig`] and the
//! mode product [`mode_apply`], which contracts a small square matrix against
//! one axis of a [`LatentTensor`] without ever forming an `M x M` operator.
//!
//! Tensor layout is lexicographic with axis 0 slowest and the channel index
//! fastest, which matches the Kronecker convention `K = K_1 ⊗ ... ⊗ K_d`.

use std::cell::Cell;

use faer::linalg::solvers::DenseSolveCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Jacobi stops once the off-diagonal Frobenius norm falls below this
/// fraction of the input Frobenius norm.
pub const JACOBI_REL_TOL: f64 = 1e-12;
/// Maximum number of full Jacobi sweeps.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Allowed asymmetry, relative to `1 + max|A|`, for symmetric inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Reciprocal 1-norm condition number below which a dense inverse is refused.
pub const RCOND_MIN: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NonSymmetric { asymmetry: f64 },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("matrix is singular")]
    Singular,
    #[error("matrix is ill-conditioned (reciprocal condition {rcond:e})")]
    IllConditioned { rcond: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite entry")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self { rows: r, cols: c, values: rows.concat() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, values: self.values.iter().map(|v| v * s).collect() }
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, values })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, values })
    }

    /// Largest entrywise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LinalgError::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    /// `selfᵀ * other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(LinalgError::ShapeMismatch(format!(
                "matmul_tn {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, b, &mut out.values[i * other.cols..(i + 1) * other.cols]);
            }
        }
        Ok(out)
    }

    /// `self * otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "matmul_nt {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j))))
    }

    /// Largest `|A_ij - A_ji|`; `None` for non-square input.
    pub fn asymmetry(&self) -> Option<f64> {
        if !self.is_square() {
            return None;
        }
        let n = self.rows;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        Some(worst)
    }

    /// Checks the symmetry precondition shared by the symmetric routines.
    pub fn check_symmetric(&self) -> Result<()> {
        let asym = self
            .asymmetry()
            .ok_or_else(|| LinalgError::ShapeMismatch(format!("{}x{} is not square", self.rows, self.cols)))?;
        if asym > SYMMETRY_TOL * (1.0 + self.max_abs()) {
            return Err(LinalgError::NonSymmetric { asymmetry: asym });
        }
        Ok(())
    }

    /// Induced 1-norm (max column absolute sum).
    pub fn norm_1(&self) -> f64 {
        let mut sums = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(i)) {
                *s += v.abs();
            }
        }
        sums.into_iter().fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Symmetric eigendecomposition `A = U diag(λ) Uᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymEig {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: DenseMatrix,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U diag(λ) Uᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.dim();
        let u = &self.eigenvectors;
        DenseMatrix::from_fn(n, n, |i, j| {
            (0..n).map(|k| u.get(i, k) * self.eigenvalues[k] * u.get(j, k)).sum()
        })
    }

    pub fn max_abs_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Eigenvalues come back ascending; each eigenvector's largest-magnitude
/// component is made positive (first such index on ties).
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEig> {
    a.check_symmetric()?;
    let n = a.rows();
    if n == 0 {
        return Err(LinalgError::EmptyInput);
    }
    if a.values().iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    // Work on the exactly symmetrized copy.
    let mut w = DenseMatrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = DenseMatrix::identity(n);
    let total = w.frobenius();
    let off_norm = |w: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += w.get(i, j) * w.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&w) <= JACOBI_REL_TOL * total;
    let mut sweeps = 0;
    // One sweep past the threshold polishes the (quadratically convergent)
    // residual down to rounding level.
    let mut polish_left = 1;
    while !converged || polish_left > 0 {
        if converged {
            polish_left -= 1;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            if converged {
                break;
            }
            return Err(LinalgError::NoConvergence { sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = w.get(p, p);
                let aqq = w.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..n {
                    let arp = w.get(r, p);
                    let arq = w.get(r, q);
                    w.set(r, p, c * arp - s * arq);
                    w.set(r, q, s * arp + c * arq);
                }
                for r in 0..n {
                    let apr = w.get(p, r);
                    let aqr = w.get(q, r);
                    w.set(p, r, c * apr - s * aqr);
                    w.set(q, r, s * apr + c * aqr);
                }
                w.set(p, q, 0.0);
                w.set(q, p, 0.0);
                for r in 0..n {
                    let vrp = v.get(r, p);
                    let vrq = v.get(r, q);
                    v.set(r, p, c * vrp - s * vrq);
                    v.set(r, q, s * vrp + c * vrq);
                }
            }
        }
        if !converged {
            converged = off_norm(&w) <= JACOBI_REL_TOL * total;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w.get(i, i).total_cmp(&w.get(j, j)));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| w.get(k, k)).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut best = 0;
        for r in 0..n {
            if v.get(r, k).abs() > v.get(best, k).abs() {
                best = r;
            }
        }
        let sign = if v.get(best, k) < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            eigenvectors.set(r, col, sign * v.get(r, k));
        }
    }
    Ok(SymEig { eigenvalues, eigenvectors })
}

/// Explicit inverse of a square, well-conditioned matrix.
///
/// Symmetric positive definite inputs go through a Cholesky factorization,
/// everything else through partial-pivoting LU. Refuses matrices whose
/// reciprocal 1-norm condition number is at or below [`RCOND_MIN`].
pub fn dense_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(LinalgError::ShapeMismatch(format!("{}x{} is not square", a.rows(), a.cols())));
    }
    let n = a.rows();
    if n == 0 {
        return Err(LinalgError::EmptyInput);
    }
    let fa = faer::Mat::<f64>::from_fn(n, n, |i, j| a.get(i, j));
    let symmetric = a.asymmetry().unwrap_or(f64::INFINITY) <= SYMMETRY_TOL * (1.0 + a.max_abs());
    let inv = match symmetric.then(|| fa.llt(faer::Side::Lower).ok()).flatten() {
        Some(llt) => llt.inverse(),
        None => fa.partial_piv_lu().inverse(),
    };
    let mut values = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            values.push(inv[(i, j)]);
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::Singular);
    }
    let inv = DenseMatrix { rows: n, cols: n, values };
    let rcond = 1.0 / (a.norm_1() * inv.norm_1());
    if !(rcond > RCOND_MIN) {
        return Err(LinalgError::IllConditioned { rcond });
    }
    Ok(inv)
}

/// `|α| ∏_j max_i |λ_i^{(j)}|`: the spectral radius of `α (K_1 ⊗ ... ⊗ K_d)`.
pub fn spectral_radius_from_axes(eigs: &[SymEig], alpha: f64) -> Result<f64> {
    if eigs.is_empty() {
        return Err(LinalgError::EmptyInput);
    }
    Ok(alpha.abs() * eigs.iter().map(SymEig::max_abs_eigenvalue).product::<f64>())
}

/// Materializes `A_1 ⊗ A_2 ⊗ ... ⊗ A_d`. Oracle and naive-path use only.
pub fn kron_materialize(mats: &[DenseMatrix]) -> Result<DenseMatrix> {
    let (first, rest) = mats.split_first().ok_or(LinalgError::EmptyInput)?;
    let mut acc = first.clone();
    for b in rest {
        let (ar, ac, br, bc) = (acc.rows(), acc.cols(), b.rows(), b.cols());
        acc = DenseMatrix::from_fn(ar * br, ac * bc, |i, j| acc.get(i / br, j / bc) * b.get(i % br, j % bc));
    }
    Ok(acc)
}

/// Features on a product grid: `∏ N_j` grid points times `channels` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor {
    axis_sizes: Vec<usize>,
    channels: usize,
    values: Vec<f64>,
}

impl LatentTensor {
    pub fn new(axis_sizes: Vec<usize>, channels: usize, values: Vec<f64>) -> Result<Self> {
        if axis_sizes.is_empty() {
            return Err(LinalgError::ShapeMismatch("tensor needs at least one axis".into()));
        }
        let m: usize = axis_sizes.iter().product();
        if values.len() != m * channels {
            return Err(LinalgError::ShapeMismatch(format!(
                "{} values for axes {:?} x {channels} channels",
                values.len(),
                axis_sizes
            )));
        }
        Ok(Self { axis_sizes, channels, values })
    }

    pub fn zeros(axis_sizes: Vec<usize>, channels: usize) -> Self {
        let m: usize = axis_sizes.iter().product();
        Self { axis_sizes, channels, values: vec![0.0; m * channels] }
    }

    /// Reinterprets an `M x h` matrix as a tensor over `axis_sizes`.
    pub fn from_matrix(axis_sizes: Vec<usize>, m: DenseMatrix) -> Result<Self> {
        let h = m.cols();
        Self::new(axis_sizes, h, m.into_values())
    }

    pub fn into_matrix(self) -> DenseMatrix {
        let m = self.num_points();
        DenseMatrix { rows: m, cols: self.channels, values: self.values }
    }

    pub fn axis_sizes(&self) -> &[usize] {
        &self.axis_sizes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dim(&self) -> usize {
        self.axis_sizes.len()
    }

    pub fn num_points(&self) -> usize {
        self.axis_sizes.iter().product()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.axis_sizes != other.axis_sizes || self.channels != other.channels {
            return Err(LinalgError::ShapeMismatch(format!(
                "{:?}x{} vs {:?}x{}",
                self.axis_sizes, self.channels, other.axis_sizes, other.channels
            )));
        }
        Ok(())
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(dot(&self.values, &other.values))
    }

    /// `self + s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        axpy(s, &other.values, &mut self.values);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `(pre, n, post)` factorization of the index space around `axis`.
    fn split(&self, axis: usize) -> (usize, usize, usize) {
        let pre: usize = self.axis_sizes[..axis].iter().product();
        let post: usize = self.axis_sizes[axis + 1..].iter().product::<usize>() * self.channels;
        (pre, self.axis_sizes[axis], post)
    }
}

thread_local! {
    static SLAB_PRODUCTS: Cell<u64> = const { Cell::new(0) };
    static LARGEST_BUFFER: Cell<usize> = const { Cell::new(0) };
}

/// Counters for the mode-product primitive on the current thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModeProductStats {
    /// Number of matrix-row-times-slab products (one per output index along
    /// the contracted axis).
    pub slab_products: u64,
    /// Largest output buffer (in `f64`s) allocated by a mode product.
    pub largest_buffer: usize,
}

pub fn mode_product_stats() -> ModeProductStats {
    ModeProductStats {
        slab_products: SLAB_PRODUCTS.with(Cell::get),
        largest_buffer: LARGEST_BUFFER.with(Cell::get),
    }
}

pub fn reset_mode_product_stats() {
    SLAB_PRODUCTS.with(|c| c.set(0));
    LARGEST_BUFFER.with(|c| c.set(0));
}

/// Contracts `a` against axis `axis` of `t`: `out[.., i, ..] = Σ_k a[i,k] t[.., k, ..]`.
pub fn mode_apply(t: &LatentTensor, axis: usize, a: &DenseMatrix) -> Result<LatentTensor> {
    if axis >= t.dim() {
        return Err(LinalgError::ShapeMismatch(format!("axis {axis} out of range for {}-d tensor", t.dim())));
    }
    let (pre, n, post) = t.split(axis);
    if a.rows() != n || a.cols() != n {
        return Err(LinalgError::ShapeMismatch(format!(
            "{}x{} matrix on axis {axis} of size {n}",
            a.rows(),
            a.cols()
        )));
    }
    let mut out = vec![0.0; t.values.len()];
    for p in 0..pre {
        let base = p * n * post;
        for i in 0..n {
            let dst = &mut out[base + i * post..base + (i + 1) * post];
            for (k, &aik) in a.row(i).iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                axpy(aik, &t.values[base + k * post..base + (k + 1) * post], dst);
            }
        }
    }
    SLAB_PRODUCTS.with(|c| c.set(c.get() + n as u64));
    LARGEST_BUFFER.with(|c| c.set(c.get().max(out.len())));
    Ok(LatentTensor { axis_sizes: t.axis_sizes.clone(), channels: t.channels, values: out })
}

/// Applies `A_1 ⊗ ... ⊗ A_d` to every channel as `d` successive mode products.
pub fn kron_apply(mats: &[DenseMatrix], t: &LatentTensor) -> Result<LatentTensor> {
    if mats.len() != t.dim() {
        return Err(LinalgError::ShapeMismatch(format!("{} factors for a {}-d tensor", mats.len(), t.dim())));
    }
    let mut out = t.clone();
    for (axis, a) in mats.iter().enumerate() {
        out = mode_apply(&out, axis, a)?;
    }
    Ok(out)
}

/// Kronecker product applied on every axis except `skip`.
pub fn kron_apply_except(mats: &[DenseMatrix], t: &LatentTensor, skip: usize) -> Result<LatentTensor> {
    if mats.len() != t.dim() {
        return Err(LinalgError::ShapeMismatch(format!("{} factors for a {}-d tensor", mats.len(), t.dim())));
    }
    let mut out = t.clone();
    for (axis, a) in mats.iter().enumerate() {
        if axis != skip {
            out = mode_apply(&out, axis, a)?;
        }
    }
    Ok(out)
}

/// `G[p,q] = Σ z[.., p, ..] w[.., q, ..]` summed over every index except `axis`.
///
/// This is the gradient of `<z, mode_apply(w, axis, A)>` with respect to `A`.
pub fn mode_gram(z: &LatentTensor, w: &LatentTensor, axis: usize) -> Result<DenseMatrix> {
    z.check_same_shape(w)?;
    if axis >= z.dim() {
        return Err(LinalgError::ShapeMismatch(format!("axis {axis} out of range")));
    }
    let (pre, n, post) = z.split(axis);
    let mut g = DenseMatrix::zeros(n, n);
    for p in 0..pre {
        let base = p * n * post;
        for i in 0..n {
            let zi = &z.values[base + i * post..base + (i + 1) * post];
            for k in 0..n {
                let wk = &w.values[base + k * post..base + (k + 1) * post];
                g.add_at(i, k, dot(zi, wk));
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random_sym(n: usize, seed: &mut u64) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = lcg(seed);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    fn check_eig(a: &DenseMatrix, e: &SymEig) {
        let n = a.rows();
        let u = &e.eigenvectors;
        let utu = u.matmul_tn(u).unwrap();
        assert!(utu.max_abs_diff(&DenseMatrix::identity(n)).unwrap() <= 1e-10 * n as f64);
        let rec = e.reconstruct();
        assert!(rec.max_abs_diff(a).unwrap() <= 1e-9 * (1.0 + a.max_abs()));
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn eig_identity() {
        let a = DenseMatrix::identity(3);
        let e = sym_eig(&a).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        check_eig(&a, &e);
    }

    #[test]
    fn eig_two_by_two() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
        let e = sym_eig(&a).unwrap();
        assert!((e.eigenvalues[0] - 0.5).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.5).abs() < 1e-14);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        // Sign convention: largest-magnitude component positive, first on ties.
        let u = &e.eigenvectors;
        assert!((u.get(0, 0) - r).abs() < 1e-14 && (u.get(1, 0) + r).abs() < 1e-14);
        assert!((u.get(0, 1) - r).abs() < 1e-14 && (u.get(1, 1) - r).abs() < 1e-14);
        check_eig(&a, &e);
    }

    #[test]
    fn eig_random_reconstructs() {
        let mut seed = 7;
        for n in [1, 2, 5, 8, 17] {
            let a = random_sym(n, &mut seed);
            check_eig(&a, &sym_eig(&a).unwrap());
        }
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]);
        assert!(matches!(sym_eig(&a), Err(LinalgError::NonSymmetric { .. })));
        let r = DenseMatrix::zeros(2, 3);
        assert!(matches!(sym_eig(&r), Err(LinalgError::ShapeMismatch(_))));
    }

    #[test]
    fn eig_sign_convention_is_deterministic() {
        let mut seed = 99;
        let a = random_sym(6, &mut seed);
        let e1 = sym_eig(&a).unwrap();
        let e2 = sym_eig(&a).unwrap();
        assert_eq!(e1, e2);
        for col in 0..6 {
            let column: Vec<f64> = (0..6).map(|r| e1.eigenvectors.get(r, col)).collect();
            let best = column.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(best > 0.0);
        }
    }

    #[test]
    fn inverse_scalar_and_two_by_two() {
        let a = DenseMatrix::identity(4).scaled(2.0);
        let inv = dense_inverse(&a).unwrap();
        assert!(inv.max_abs_diff(&DenseMatrix::identity(4).scaled(0.5)).unwrap() < 1e-15);

        let a = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
        let expect = DenseMatrix::from_rows(&[vec![1.0, -0.5], vec![-0.5, 1.0]]).scaled(1.0 / 0.75);
        assert!(dense_inverse(&a).unwrap().max_abs_diff(&expect).unwrap() < 1e-14);
    }

    #[test]
    fn inverse_random_spd_and_indefinite() {
        let mut seed = 3;
        let b = random_sym(16, &mut seed);
        let spd = b.matmul_tn(&b).unwrap().add(&DenseMatrix::identity(16)).unwrap();
        let inv = dense_inverse(&spd).unwrap();
        let res = spd.matmul(&inv).unwrap().max_abs_diff(&DenseMatrix::identity(16)).unwrap();
        assert!(res <= 1e-8 * 16.0);

        let ind = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let inv = dense_inverse(&ind).unwrap();
        assert!(inv.max_abs_diff(&ind).unwrap() < 1e-15);
    }

    #[test]
    fn inverse_errors() {
        let s = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(
            dense_inverse(&s),
            Err(LinalgError::Singular) | Err(LinalgError::IllConditioned { .. })
        ));
        let ill = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-14]]);
        assert!(matches!(dense_inverse(&ill), Err(LinalgError::IllConditioned { .. })));
    }

    #[test]
    fn spectral_radius_cases() {
        let e = sym_eig(&DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]])).unwrap();
        assert_eq!(spectral_radius_from_axes(&[e.clone()], 0.0).unwrap(), 0.0);
        assert!((spectral_radius_from_axes(&[e.clone()], -0.6).unwrap() - 0.9).abs() < 1e-14);
        assert!((spectral_radius_from_axes(&[e.clone(), e], 0.4).unwrap() - 0.9).abs() < 1e-14);
        assert_eq!(spectral_radius_from_axes(&[], 1.0), Err(LinalgError::EmptyInput));
    }

    #[test]
    fn mode_apply_permutation() {
        let t = LatentTensor::new(vec![2], 1, vec![1.0, 2.0]).unwrap();
        let p = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(mode_apply(&t, 0, &p).unwrap().values(), &[2.0, 1.0]);
        assert_eq!(mode_apply(&t, 0, &DenseMatrix::identity(2)).unwrap(), t);
        assert!(mode_apply(&t, 0, &DenseMatrix::identity(3)).is_err());
        assert!(mode_apply(&t, 1, &p).is_err());
    }

    #[test]
    fn mode_apply_matches_dense_kron_on_second_axis() {
        let mut seed = 11;
        let t = LatentTensor::new(vec![2, 2], 1, (0..4).map(|_| lcg(&mut seed)).collect()).unwrap();
        let a = DenseMatrix::from_fn(2, 2, |_, _| lcg(&mut seed));
        let dense = kron_materialize(&[DenseMatrix::identity(2), a.clone()]).unwrap();
        let expect = dense.matmul(&DenseMatrix::new(4, 1, t.values().to_vec()).unwrap()).unwrap();
        let got = mode_apply(&t, 1, &a).unwrap();
        for (g, e) in got.values().iter().zip(expect.values()) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn kron_apply_rank_one() {
        let ones = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let t = LatentTensor::new(vec![2, 2], 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(kron_apply(&[ones.clone(), ones], &t).unwrap().values(), &[1.0; 4]);
    }

    #[test]
    fn kron_apply_counts_slab_products_without_large_buffers() {
        let mut seed = 5;
        let sizes = vec![3, 4, 5];
        let mats: Vec<_> = sizes.iter().map(|&n| DenseMatrix::from_fn(n, n, |_, _| lcg(&mut seed))).collect();
        let t = LatentTensor::new(sizes.clone(), 2, (0..120).map(|_| lcg(&mut seed)).collect()).unwrap();
        reset_mode_product_stats();
        kron_apply(&mats, &t).unwrap();
        let stats = mode_product_stats();
        assert_eq!(stats.slab_products, 12);
        assert_eq!(stats.largest_buffer, 120);
    }

    #[test]
    fn mode_gram_is_adjoint_of_mode_apply() {
        let mut seed = 17;
        let z = LatentTensor::new(vec![3, 2], 2, (0..12).map(|_| lcg(&mut seed)).collect()).unwrap();
        let w = LatentTensor::new(vec![3, 2], 2, (0..12).map(|_| lcg(&mut seed)).collect()).unwrap();
        let a = DenseMatrix::from_fn(3, 3, |_, _| lcg(&mut seed));
        let g = mode_gram(&z, &w, 0).unwrap();
        let lhs = z.inner(&mode_apply(&w, 0, &a).unwrap()).unwrap();
        let rhs: f64 = g.values().iter().zip(a.values()).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-13);
    }
}
