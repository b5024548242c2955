//! Kernel evaluation, Gram assembly and latent-grid geometry.
//!
//! The learnable base kernel on one axis is a scaled sum of a Gaussian and a
//! Laplace profile,
//!
//! ```text
//! k(x, y) = c * (exp(-(β (x - y))²) + exp(-|γ (x - y)|))
//! ```
//!
//! and the multi-dimensional kernel is the product of the per-axis kernels,
//! so the Gram matrix on a product grid is the Kronecker product of the axis
//! Grams. Axis Grams are unnormalized; any `1/N` weighting is absorbed into
//! the learnable amplitude `c` and the propagation coefficient `α`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("bad grid range: {0}")]
    BadRange(String),
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Learnable parameters of one axis kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisKernelParams {
    pub c: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Partial derivatives of an axis kernel value with respect to
/// `(log c, β, γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AxisKernelGrad {
    pub d_log_c: f64,
    pub d_beta: f64,
    pub d_gamma: f64,
}

impl AxisKernelParams {
    pub fn new(c: f64, beta: f64, gamma: f64) -> Result<Self> {
        let p = Self { c, beta, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(KernelError::InvalidParams(format!("amplitude c must be positive, got {}", self.c)));
        }
        if self.beta == 0.0 || !self.beta.is_finite() {
            return Err(KernelError::InvalidParams(format!("beta must be nonzero and finite, got {}", self.beta)));
        }
        if self.gamma == 0.0 || !self.gamma.is_finite() {
            return Err(KernelError::InvalidParams(format!("gamma must be nonzero and finite, got {}", self.gamma)));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let r = x - y;
        let g = self.beta * r;
        self.c * ((-(g * g)).exp() + (-(self.gamma * r).abs()).exp())
    }

    /// Value together with its gradient in the `(log c, β, γ)` coordinates.
    #[inline]
    pub fn eval_with_grad(&self, x: f64, y: f64) -> (f64, AxisKernelGrad) {
        let r = x - y;
        let g = self.beta * r;
        let gauss = (-(g * g)).exp();
        let lap = (-(self.gamma * r).abs()).exp();
        let value = self.c * (gauss + lap);
        let grad = AxisKernelGrad {
            d_log_c: value,
            d_beta: self.c * gauss * (-2.0 * self.beta * r * r),
            d_gamma: -self.c * lap * r.abs() * self.gamma.signum(),
        };
        (value, grad)
    }
}

/// One kernel branch: per-axis parameters plus its propagation coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBranch {
    pub axes: Vec<AxisKernelParams>,
    pub alpha: f64,
}

/// `Q` independent product kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiScaleKernelParams {
    pub branches: Vec<KernelBranch>,
}

impl MultiScaleKernelParams {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(KernelError::InvalidParams("at least one branch required".into()));
        }
        let d = self.branches[0].axes.len();
        for b in &self.branches {
            if b.axes.len() != d {
                return Err(KernelError::DimMismatch { expected: d, got: b.axes.len() });
            }
            if !b.alpha.is_finite() {
                return Err(KernelError::InvalidParams("alpha must be finite".into()));
            }
            b.axes.iter().try_for_each(AxisKernelParams::validate)?;
        }
        Ok(())
    }
}

/// `∏_j k_j(x_j, y_j)`.
pub fn product_kernel_eval(axes: &[AxisKernelParams], x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != axes.len() {
        return Err(KernelError::DimMismatch { expected: axes.len(), got: x.len() });
    }
    if y.len() != axes.len() {
        return Err(KernelError::DimMismatch { expected: axes.len(), got: y.len() });
    }
    Ok(axes.iter().zip(x.iter().zip(y)).map(|(p, (&a, &b))| p.eval(a, b)).product())
}

/// Compactly supported hat kernel `scale * max(1 - |x - y| / r, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearWindowKernel {
    pub radius: f64,
    pub scale: f64,
    pub alpha: f64,
}

impl LinearWindowKernel {
    pub fn new(radius: f64, scale: f64, alpha: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(KernelError::InvalidParams(format!("radius must be positive, got {radius}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(KernelError::InvalidParams(format!("scale must be positive, got {scale}")));
        }
        Ok(Self { radius, scale, alpha })
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let dist = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        self.eval_distance(dist)
    }

    #[inline]
    pub fn eval_distance(&self, dist: f64) -> f64 {
        if dist >= self.radius {
            0.0
        } else {
            self.scale * (1.0 - dist / self.radius)
        }
    }
}

/// `linear_window_eval` as a free function.
pub fn linear_window_eval(k: &LinearWindowKernel, x: &[f64], y: &[f64]) -> f64 {
    k.eval(x, y)
}

/// First pair of coincident coordinates, if any.
pub fn duplicate_coords(coords: &[f64]) -> Option<(usize, usize)> {
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            if coords[i] == coords[j] {
                return Some((i, j));
            }
        }
    }
    None
}

/// Raised (not as an error) when an axis Gram is built on repeated points,
/// which degrades it from positive definite to positive semidefinite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DuplicatePointsWarning {
    pub first: usize,
    pub second: usize,
}

/// `(K)_{pq} = k(coords[p], coords[q])`.
pub fn axis_gram(p: &AxisKernelParams, coords: &[f64]) -> (DenseMatrix, Option<DuplicatePointsWarning>) {
    let n = coords.len();
    let mut g = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = p.eval(coords[i], coords[j]);
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    let warn = duplicate_coords(coords).map(|(first, second)| {
        log::warn!("axis Gram built on duplicate coordinates {first} and {second}");
        DuplicatePointsWarning { first, second }
    });
    (g, warn)
}

/// Per-entry gradients of an axis Gram, contracted against an upstream
/// gradient `g_bar` of the same shape.
pub fn axis_gram_vjp(p: &AxisKernelParams, rows: &[f64], cols: &[f64], g_bar: &DenseMatrix) -> AxisKernelGrad {
    let mut acc = AxisKernelGrad::default();
    for (i, &x) in rows.iter().enumerate() {
        for (j, &y) in cols.iter().enumerate() {
            let w = g_bar.get(i, j);
            if w == 0.0 {
                continue;
            }
            let (_, d) = p.eval_with_grad(x, y);
            acc.d_log_c += w * d.d_log_c;
            acc.d_beta += w * d.d_beta;
            acc.d_gamma += w * d.d_gamma;
        }
    }
    acc
}

/// `(K)_{pq} = k(rows[p], cols[q])` for one axis.
pub fn axis_cross(p: &AxisKernelParams, rows: &[f64], cols: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(rows.len(), cols.len(), |i, j| p.eval(rows[i], cols[j]))
}

/// A finite collection of points in `R^d`.
pub trait PointSet {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    /// Writes point `i` into `out` (length `dim`).
    fn point_into(&self, i: usize, out: &mut [f64]);

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn point(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        self.point_into(i, &mut v);
        v
    }
}

/// Structured latent grid: the product of per-axis coordinate arrays,
/// enumerated lexicographically with axis 0 slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGrid {
    axes: Vec<Vec<f64>>,
    grid_min: f64,
    grid_max: f64,
}

impl LatentGrid {
    pub fn new(axes: Vec<Vec<f64>>, grid_min: f64, grid_max: f64) -> Result<Self> {
        if axes.is_empty() {
            return Err(KernelError::BadRange("grid needs at least one axis".into()));
        }
        for (j, a) in axes.iter().enumerate() {
            if a.len() < 2 {
                return Err(KernelError::BadRange(format!("axis {j} has fewer than 2 points")));
            }
            if a.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(KernelError::BadRange(format!("axis {j} is not strictly increasing")));
            }
            if a[0] < grid_min || a[a.len() - 1] > grid_max {
                return Err(KernelError::BadRange(format!("axis {j} leaves [{grid_min}, {grid_max}]")));
            }
        }
        Ok(Self { axes, grid_min, grid_max })
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn axis(&self, j: usize) -> &[f64] {
        &self.axes[j]
    }

    pub fn axis_sizes(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.grid_min, self.grid_max)
    }

    /// Multi-index of flat grid point `m`.
    pub fn multi_index(&self, mut m: usize) -> Vec<usize> {
        let mut idx = vec![0; self.axes.len()];
        for j in (0..self.axes.len()).rev() {
            let n = self.axes[j].len();
            idx[j] = m % n;
            m /= n;
        }
        idx
    }
}

impl PointSet for LatentGrid {
    fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    fn dim(&self) -> usize {
        self.axes.len()
    }

    fn point_into(&self, i: usize, out: &mut [f64]) {
        for (j, k) in self.multi_index(i).into_iter().enumerate() {
            out[j] = self.axes[j][k];
        }
    }
}

/// `L` equispaced points per axis on `[lo, hi]`, endpoints included.
pub fn grid_linspace(d: usize, l: usize, lo: f64, hi: f64) -> Result<LatentGrid> {
    if d == 0 {
        return Err(KernelError::BadRange("dimension must be at least 1".into()));
    }
    if l < 2 {
        return Err(KernelError::BadRange(format!("need at least 2 points per axis, got {l}")));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(KernelError::BadRange(format!("need lo < hi, got [{lo}, {hi}]")));
    }
    let step = (hi - lo) / (l - 1) as f64;
    let axis: Vec<f64> = (0..l).map(|i| if i == l - 1 { hi } else { lo + step * i as f64 }).collect();
    LatentGrid::new(vec![axis; d], lo, hi)
}

/// Scattered points with optional per-point channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
    channels: usize,
    values: Vec<f64>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>, channels: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(KernelError::InvalidCloud("dimension must be at least 1".into()));
        }
        if coords.len() % dim != 0 {
            return Err(KernelError::InvalidCloud(format!("{} coordinates for dimension {dim}", coords.len())));
        }
        let n = coords.len() / dim;
        if values.len() != n * channels {
            return Err(KernelError::InvalidCloud(format!(
                "{} channel values for {n} points x {channels} channels",
                values.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::InvalidCloud("non-finite coordinate".into()));
        }
        Ok(Self { dim, coords, channels, values })
    }

    /// Coordinates only.
    pub fn from_coords(dim: usize, coords: Vec<f64>) -> Result<Self> {
        Self::new(dim, coords, 0, Vec::new())
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel_row(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    /// Coordinates of every point along axis `j`.
    pub fn axis_coords(&self, j: usize) -> Vec<f64> {
        self.coords.iter().skip(j).step_by(self.dim).copied().collect()
    }

    /// Reorders points (and channels) as `perm[new] = old`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut coords = Vec::with_capacity(self.coords.len());
        let mut values = Vec::with_capacity(self.values.len());
        for &i in perm {
            coords.extend_from_slice(self.coord(i));
            values.extend_from_slice(self.channel_row(i));
        }
        Self { dim: self.dim, coords, channels: self.channels, values }
    }

    /// The subset of points at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        self.permuted(idx)
    }
}

impl PointSet for PointCloud {
    fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn point_into(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.coord(i));
    }
}

/// Cross-kernel matrix with entries `k(rows_r, cols_c)` for the product kernel.
pub fn cross_kernel(axes: &[AxisKernelParams], rows: &dyn PointSet, cols: &dyn PointSet) -> Result<DenseMatrix> {
    let d = axes.len();
    for set in [rows, cols] {
        if set.dim() != d {
            return Err(KernelError::DimMismatch { expected: d, got: set.dim() });
        }
    }
    let rp: Vec<Vec<f64>> = (0..rows.len()).map(|i| rows.point(i)).collect();
    let cp: Vec<Vec<f64>> = (0..cols.len()).map(|i| cols.point(i)).collect();
    Ok(DenseMatrix::from_fn(rows.len(), cols.len(), |r, c| {
        axes.iter().enumerate().map(|(j, p)| p.eval(rp[r][j], cp[c][j])).product()
    }))
}

/// Cross-kernel matrix for the linear-window kernel.
pub fn cross_kernel_window(k: &LinearWindowKernel, rows: &dyn PointSet, cols: &dyn PointSet) -> Result<DenseMatrix> {
    if rows.dim() != cols.dim() {
        return Err(KernelError::DimMismatch { expected: rows.dim(), got: cols.dim() });
    }
    let rp: Vec<Vec<f64>> = (0..rows.len()).map(|i| rows.point(i)).collect();
    let cp: Vec<Vec<f64>> = (0..cols.len()).map(|i| cols.point(i)).collect();
    Ok(DenseMatrix::from_fn(rows.len(), cols.len(), |r, c| k.eval(&rp[r], &cp[c])))
}
