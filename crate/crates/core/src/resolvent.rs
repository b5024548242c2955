//! Discrete infinite- and finite-order kernel propagators on a product grid.
//!
//! With `K = K_1 ⊗ ... ⊗ K_d` built from per-axis Grams, three operators act
//! on latent tensors:
//!
//! * [`ResolventVanilla`]: the full resolvent `(I - αK)⁻¹`, applied as
//!   `(⊗U_j) diag(1 / (1 - α ∏λ)) (⊗U_j)ᵀ` from per-axis eigensystems.
//! * [`ResolventTP`]: the tensor product of per-axis resolvents
//!   `⊗_j (I - αK_j)⁻¹`. It coincides with the vanilla operator only for
//!   `d = 1`.
//! * [`TruncatedPropagator`]: `R_p = I + αK + ... + (αK)^p` by Horner
//!   recursion.
//!
//! None of them forms an `M x M` matrix. [`apply_naive_inverse`] does, and
//! exists as the oracle and benchmark foil.
//!
//! Every operator here is symmetric, so reverse-mode sweeps reuse the
//! forward application for the input gradient.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{
    dense_inverse, kron_apply, kron_apply_except, kron_materialize, mode_gram, sym_eig, DenseMatrix, LatentTensor,
    LinalgError, SymEig,
};
use crate::store::{StoreError, TensorStore};

/// Smallest accepted `|1 - α ∏λ|` in the vanilla diagonal.
pub const SINGULAR_TOL: f64 = 1e-10;
/// Default limit on `M` for paths that materialize `M x M` matrices.
pub const DEFAULT_NAIVE_CAP: usize = 8192;

#[derive(Debug, Error)]
pub enum ResolventError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("near-singular diagonal entry {index}: 1 - α∏λ = {value:e}")]
    SingularDiagonal { index: usize, value: f64 },
    #[error("I - αK is singular or ill-conditioned on axis {axis}")]
    SingularAxis { axis: usize },
    #[error("grid of {m} points exceeds the dense cap of {cap}")]
    CapExceeded { m: usize, cap: usize },
    #[error("at least one axis Gram is required")]
    NoAxes,
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, ResolventError>;

fn check_axes(axis_grams: &[DenseMatrix]) -> Result<Vec<usize>> {
    if axis_grams.is_empty() {
        return Err(ResolventError::NoAxes);
    }
    axis_grams
        .iter()
        .map(|g| {
            g.check_symmetric()?;
            Ok(g.rows())
        })
        .collect()
}

fn check_tensor(axis_sizes: &[usize], t: &LatentTensor) -> Result<()> {
    if t.axis_sizes() != axis_sizes {
        return Err(LinalgError::ShapeMismatch(format!(
            "operator on axes {:?} applied to tensor on {:?}",
            axis_sizes,
            t.axis_sizes()
        ))
        .into());
    }
    Ok(())
}

/// Products `∏_j v_j[i_j]` enumerated lexicographically with axis 0 slowest.
pub fn kron_vector(factors: &[&[f64]]) -> Vec<f64> {
    let mut acc = vec![1.0];
    for f in factors {
        let mut next = Vec::with_capacity(acc.len() * f.len());
        for a in &acc {
            next.extend(f.iter().map(|b| a * b));
        }
        acc = next;
    }
    acc
}

/// Full resolvent in factored eigen form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventVanilla {
    axis_eigs: Vec<SymEig>,
    alpha: f64,
    diag_weights: Vec<f64>,
    axis_grams: Vec<DenseMatrix>,
    #[serde(skip)]
    eigvecs: Vec<DenseMatrix>,
    #[serde(skip)]
    eigvecs_t: Vec<DenseMatrix>,
}

impl ResolventVanilla {
    fn from_parts(axis_grams: Vec<DenseMatrix>, axis_eigs: Vec<SymEig>, alpha: f64, diag_weights: Vec<f64>) -> Self {
        let eigvecs: Vec<_> = axis_eigs.iter().map(|e| e.eigenvectors.clone()).collect();
        let eigvecs_t = eigvecs.iter().map(DenseMatrix::transpose).collect();
        Self { axis_eigs, alpha, diag_weights, axis_grams, eigvecs, eigvecs_t }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn axis_eigs(&self) -> &[SymEig] {
        &self.axis_eigs
    }

    pub fn diag_weights(&self) -> &[f64] {
        &self.diag_weights
    }

    pub fn axis_grams(&self) -> &[DenseMatrix] {
        &self.axis_grams
    }

    pub fn axis_sizes(&self) -> Vec<usize> {
        self.axis_eigs.iter().map(SymEig::dim).collect()
    }

    /// Serializes eigensystems, α, diagonal weights and axis Grams.
    pub fn to_store(&self) -> Result<TensorStore> {
        let mut s = TensorStore::new("resolvent-vanilla");
        s.dim = Some(self.axis_eigs.len());
        s.meta = serde_json::json!({ "alpha": self.alpha });
        s.put("alpha", vec![1], vec![self.alpha])?;
        s.put("diag_weights", vec![self.diag_weights.len()], self.diag_weights.clone())?;
        for (j, (e, g)) in self.axis_eigs.iter().zip(&self.axis_grams).enumerate() {
            let n = e.dim();
            s.put(&format!("eigenvalues_{j}"), vec![n], e.eigenvalues.clone())?;
            s.put(&format!("eigenvectors_{j}"), vec![n, n], e.eigenvectors.values().to_vec())?;
            s.put(&format!("gram_{j}"), vec![n, n], g.values().to_vec())?;
        }
        Ok(s)
    }

    pub fn from_store(s: &TensorStore) -> Result<Self> {
        s.expect_kind("resolvent-vanilla")?;
        let d = s.dim.ok_or_else(|| StoreError::Manifest("missing dim".into()))?;
        let alpha = s.get_shaped("alpha", &[1])?[0];
        let mut eigs = Vec::with_capacity(d);
        let mut grams = Vec::with_capacity(d);
        for j in 0..d {
            let (shape, lam) = s.get(&format!("eigenvalues_{j}"))?;
            let n = shape[0];
            let u = s.get_shaped(&format!("eigenvectors_{j}"), &[n, n])?;
            let g = s.get_shaped(&format!("gram_{j}"), &[n, n])?;
            eigs.push(SymEig { eigenvalues: lam.to_vec(), eigenvectors: DenseMatrix::new(n, n, u.to_vec())? });
            grams.push(DenseMatrix::new(n, n, g.to_vec())?);
        }
        let m: usize = eigs.iter().map(SymEig::dim).product();
        let w = s.get_shaped("diag_weights", &[m])?.to_vec();
        Ok(Self::from_parts(grams, eigs, alpha, w))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.to_store()?.save(dir)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_store(&TensorStore::load(dir)?)
    }
}

/// Eigendecomposes every axis Gram and forms the `M` diagonal weights.
pub fn build_vanilla(axis_grams: &[DenseMatrix], alpha: f64) -> Result<ResolventVanilla> {
    check_axes(axis_grams)?;
    let eigs = axis_grams.iter().map(sym_eig).collect::<std::result::Result<Vec<_>, _>>()?;
    let lam: Vec<&[f64]> = eigs.iter().map(|e| e.eigenvalues.as_slice()).collect();
    let prods = kron_vector(&lam);
    let mut weights = Vec::with_capacity(prods.len());
    for (index, p) in prods.into_iter().enumerate() {
        let value = 1.0 - alpha * p;
        if !(value.abs() >= SINGULAR_TOL) {
            return Err(ResolventError::SingularDiagonal { index, value });
        }
        weights.push(1.0 / value);
    }
    Ok(ResolventVanilla::from_parts(axis_grams.to_vec(), eigs, alpha, weights))
}

pub fn apply_vanilla(r: &ResolventVanilla, t: &LatentTensor) -> Result<LatentTensor> {
    check_tensor(&r.axis_sizes(), t)?;
    let mut s = kron_apply(&r.eigvecs_t, t)?;
    let h = s.channels();
    for (row, w) in s.values_mut().chunks_exact_mut(h.max(1)).zip(&r.diag_weights) {
        row.iter_mut().for_each(|v| *v *= w);
    }
    Ok(kron_apply(&r.eigvecs, &s)?)
}

/// Tensor product of per-axis resolvents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolventTP {
    axis_inverses: Vec<DenseMatrix>,
    axis_grams: Vec<DenseMatrix>,
    alpha: f64,
}

impl ResolventTP {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn axis_inverses(&self) -> &[DenseMatrix] {
        &self.axis_inverses
    }

    pub fn axis_grams(&self) -> &[DenseMatrix] {
        &self.axis_grams
    }

    pub fn axis_sizes(&self) -> Vec<usize> {
        self.axis_inverses.iter().map(DenseMatrix::rows).collect()
    }
}

/// Inverts `I - αK_j` on every axis.
pub fn build_tp(axis_grams: &[DenseMatrix], alpha: f64) -> Result<ResolventTP> {
    check_axes(axis_grams)?;
    let mut inverses = Vec::with_capacity(axis_grams.len());
    for (axis, k) in axis_grams.iter().enumerate() {
        let n = k.rows();
        let a = DenseMatrix::identity(n).sub(&k.scaled(alpha))?;
        let inv = dense_inverse(&a).map_err(|e| match e {
            LinalgError::Singular | LinalgError::IllConditioned { .. } => ResolventError::SingularAxis { axis },
            other => other.into(),
        })?;
        let resid = a.matmul(&inv)?.sub(&DenseMatrix::identity(n))?.max_abs();
        if !(resid <= 1e-8 * n as f64) {
            return Err(ResolventError::SingularAxis { axis });
        }
        inverses.push(inv);
    }
    Ok(ResolventTP { axis_inverses: inverses, axis_grams: axis_grams.to_vec(), alpha })
}

pub fn apply_tp(r: &ResolventTP, t: &LatentTensor) -> Result<LatentTensor> {
    check_tensor(&r.axis_sizes(), t)?;
    Ok(kron_apply(&r.axis_inverses, t)?)
}

/// `I + αK + ... + (αK)^p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedPropagator {
    axis_grams: Vec<DenseMatrix>,
    alpha: f64,
    order: usize,
}

impl TruncatedPropagator {
    pub fn new(axis_grams: &[DenseMatrix], alpha: f64, order: usize) -> Result<Self> {
        check_axes(axis_grams)?;
        Ok(Self { axis_grams: axis_grams.to_vec(), alpha, order })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn axis_grams(&self) -> &[DenseMatrix] {
        &self.axis_grams
    }

    pub fn axis_sizes(&self) -> Vec<usize> {
        self.axis_grams.iter().map(DenseMatrix::rows).collect()
    }

    /// Horner iterates `s_0 = t, s_k = t + αK s_{k-1}` for `k = 0..=p`.
    fn iterates(&self, t: &LatentTensor) -> Result<Vec<LatentTensor>> {
        check_tensor(&self.axis_sizes(), t)?;
        let mut out = Vec::with_capacity(self.order + 1);
        out.push(t.clone());
        for k in 0..self.order {
            let mut s = kron_apply(&self.axis_grams, &out[k])?;
            s.scale(self.alpha);
            s.add_scaled(1.0, t)?;
            out.push(s);
        }
        Ok(out)
    }
}

pub fn apply_truncated(tp: &TruncatedPropagator, t: &LatentTensor) -> Result<LatentTensor> {
    check_tensor(&tp.axis_sizes(), t)?;
    let mut s = t.clone();
    for _ in 0..tp.order {
        let mut next = kron_apply(&tp.axis_grams, &s)?;
        next.scale(tp.alpha);
        next.add_scaled(1.0, t)?;
        s = next;
    }
    Ok(s)
}

fn materialized_system(axis_grams: &[DenseMatrix], alpha: f64, cap: usize) -> Result<DenseMatrix> {
    check_axes(axis_grams)?;
    let m: usize = axis_grams.iter().map(DenseMatrix::rows).product();
    if m > cap {
        return Err(ResolventError::CapExceeded { m, cap });
    }
    let mut a = kron_materialize(axis_grams)?.scaled(-alpha);
    for i in 0..m {
        a.add_at(i, i, 1.0);
    }
    Ok(a)
}

/// Dense `(I - αK)⁻¹` over the full product grid.
pub fn naive_resolvent_matrix(axis_grams: &[DenseMatrix], alpha: f64, cap: usize) -> Result<DenseMatrix> {
    let a = materialized_system(axis_grams, alpha, cap)?;
    Ok(dense_inverse(&a)?)
}

/// Materializes `K`, inverts `I - αK` densely and multiplies.
pub fn apply_naive_inverse(axis_grams: &[DenseMatrix], alpha: f64, t: &LatentTensor, cap: usize) -> Result<LatentTensor> {
    let sizes: Vec<usize> = axis_grams.iter().map(DenseMatrix::rows).collect();
    check_tensor(&sizes, t)?;
    let inv = naive_resolvent_matrix(axis_grams, alpha, cap)?;
    apply_dense(&inv, t)
}

/// Multiplies an `M x M` matrix into every channel of `t`.
pub fn apply_dense(a: &DenseMatrix, t: &LatentTensor) -> Result<LatentTensor> {
    let sizes = t.axis_sizes().to_vec();
    let y = a.matmul(&t.clone().into_matrix())?;
    Ok(LatentTensor::from_matrix(sizes, y)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub rho_alpha_k: f64,
    pub abs_alpha_lambda_min: f64,
    pub positive_series_converges: bool,
    pub inverse_series_converges: bool,
}

/// Spectral diagnostics of `αK` from the axis spectra.
pub fn convergence_report(axis_grams: &[DenseMatrix], alpha: f64) -> Result<ConvergenceReport> {
    check_axes(axis_grams)?;
    let eigs = axis_grams.iter().map(sym_eig).collect::<std::result::Result<Vec<_>, _>>()?;
    let rho = crate::linalg::spectral_radius_from_axes(&eigs, alpha)?;
    let lambda_min: f64 = eigs
        .iter()
        .map(|e| e.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
        .product();
    let abs_alpha_lambda_min = alpha.abs() * lambda_min;
    Ok(ConvergenceReport {
        rho_alpha_k: rho,
        abs_alpha_lambda_min,
        positive_series_converges: rho < 1.0,
        inverse_series_converges: abs_alpha_lambda_min > 1.0,
    })
}

/// `-Σ_{n=1}^{n_terms} (αK)^{-n}` as a dense matrix.
pub fn inverse_power_partial_sum(axis_grams: &[DenseMatrix], alpha: f64, n_terms: usize, cap: usize) -> Result<DenseMatrix> {
    Ok(inverse_power_partial_sums(axis_grams, alpha, n_terms, cap)?.pop().unwrap_or_else(|| {
        let m = axis_grams.iter().map(DenseMatrix::rows).product();
        DenseMatrix::zeros(m, m)
    }))
}

/// All partial sums for `1..=n_terms` terms.
pub fn inverse_power_partial_sums(
    axis_grams: &[DenseMatrix],
    alpha: f64,
    n_terms: usize,
    cap: usize,
) -> Result<Vec<DenseMatrix>> {
    check_axes(axis_grams)?;
    let m: usize = axis_grams.iter().map(DenseMatrix::rows).product();
    if m > cap {
        return Err(ResolventError::CapExceeded { m, cap });
    }
    if alpha == 0.0 {
        return Err(LinalgError::Singular.into());
    }
    let b = dense_inverse(&kron_materialize(axis_grams)?.scaled(alpha))?;
    let mut power = DenseMatrix::identity(m);
    let mut sum = DenseMatrix::zeros(m, m);
    let mut out = Vec::with_capacity(n_terms);
    for _ in 0..n_terms {
        power = power.matmul(&b)?;
        sum = sum.sub(&power)?;
        out.push(sum.clone());
    }
    Ok(out)
}

/// Which latent propagator a model branch uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Tp,
    Truncated(usize),
}

impl Variant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(Self::Vanilla),
            "tp" => Some(Self::Tp),
            _ => {
                let p = s.strip_prefix("truncated")?;
                let p = p.trim_start_matches(['(', ':', '-', '=']).trim_end_matches(')');
                p.parse().ok().map(Self::Truncated)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Vanilla => "vanilla".into(),
            Self::Tp => "tp".into(),
            Self::Truncated(p) => format!("truncated({p})"),
        }
    }
}

/// Gradients produced by a reverse sweep through a propagator.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorGrad {
    pub input: LatentTensor,
    pub alpha: f64,
    /// Gradient with respect to each axis Gram (empty for dense operators).
    pub axis_grams: Vec<DenseMatrix>,
}

/// A built propagator, Kronecker-structured or dense.
#[derive(Debug, Clone, PartialEq)]
pub enum GridOperator {
    Vanilla(ResolventVanilla),
    Tp(ResolventTP),
    Truncated(TruncatedPropagator),
    /// Explicit `M x M` symmetric operator on a grid of the given axis sizes.
    Dense { matrix: DenseMatrix, axis_sizes: Vec<usize> },
}

impl GridOperator {
    pub fn build(variant: Variant, axis_grams: &[DenseMatrix], alpha: f64) -> Result<Self> {
        Ok(match variant {
            Variant::Vanilla => Self::Vanilla(build_vanilla(axis_grams, alpha)?),
            Variant::Tp => Self::Tp(build_tp(axis_grams, alpha)?),
            Variant::Truncated(p) => Self::Truncated(TruncatedPropagator::new(axis_grams, alpha, p)?),
        })
    }

    /// Dense operator for a non-separable Gram `k` on a grid.
    ///
    /// Truncated variants accumulate `Σ (αK)^n`; vanilla inverts `I - αK`.
    /// The tensor-product variant needs per-axis Grams and is built with
    /// [`GridOperator::build`] instead.
    pub fn build_dense(variant: Variant, k: &DenseMatrix, alpha: f64, axis_sizes: Vec<usize>) -> Result<Self> {
        let m = k.rows();
        if axis_sizes.iter().product::<usize>() != m || !k.is_square() {
            return Err(LinalgError::ShapeMismatch(format!("{}x{} Gram for axes {:?}", k.rows(), k.cols(), axis_sizes)).into());
        }
        let ak = k.scaled(alpha);
        let matrix = match variant {
            Variant::Vanilla => {
                let a = DenseMatrix::identity(m).sub(&ak)?;
                dense_inverse(&a)?
            }
            Variant::Truncated(p) => {
                let mut s = DenseMatrix::identity(m);
                for _ in 0..p {
                    let mut next = ak.matmul(&s)?;
                    for i in 0..m {
                        next.add_at(i, i, 1.0);
                    }
                    s = next;
                }
                s
            }
            Variant::Tp => {
                return Err(LinalgError::ShapeMismatch("tensor-product operator needs per-axis Grams".into()).into())
            }
        };
        Ok(Self::Dense { matrix, axis_sizes })
    }

    pub fn axis_sizes(&self) -> Vec<usize> {
        match self {
            Self::Vanilla(r) => r.axis_sizes(),
            Self::Tp(r) => r.axis_sizes(),
            Self::Truncated(r) => r.axis_sizes(),
            Self::Dense { axis_sizes, .. } => axis_sizes.clone(),
        }
    }

    pub fn apply(&self, t: &LatentTensor) -> Result<LatentTensor> {
        match self {
            Self::Vanilla(r) => apply_vanilla(r, t),
            Self::Tp(r) => apply_tp(r, t),
            Self::Truncated(r) => apply_truncated(r, t),
            Self::Dense { matrix, axis_sizes } => {
                check_tensor(axis_sizes, t)?;
                apply_dense(matrix, t)
            }
        }
    }

    /// Reverse sweep of `y = Op x`.
    ///
    /// `x` is the forward input, `y` the forward output and `y_bar` the
    /// upstream gradient. Dense operators report no Gram gradients.
    pub fn backward(&self, x: &LatentTensor, y: &LatentTensor, y_bar: &LatentTensor) -> Result<OperatorGrad> {
        match self {
            Self::Vanilla(r) => {
                // y = A⁻¹x with A = I - αK, so dy = A⁻¹(dα K + α dK) y.
                let z = apply_vanilla(r, y_bar)?;
                let k = &r.axis_grams;
                let alpha_bar = z.inner(&kron_apply(k, y)?)?;
                let grams = (0..k.len())
                    .map(|j| Ok(mode_gram(&z, &kron_apply_except(k, y, j)?, j)?.scaled(r.alpha)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(OperatorGrad { input: z, alpha: alpha_bar, axis_grams: grams })
            }
            Self::Tp(r) => {
                let inv = &r.axis_inverses;
                let input = kron_apply(inv, y_bar)?;
                let mut alpha_bar = 0.0;
                let mut grams = Vec::with_capacity(inv.len());
                for j in 0..inv.len() {
                    let w = kron_apply_except(inv, x, j)?;
                    let r_bar = mode_gram(y_bar, &w, j)?;
                    let s = inv[j].matmul_tn(&r_bar)?.matmul_nt(&inv[j])?;
                    alpha_bar += crate::linalg::dot(s.values(), r.axis_grams[j].values());
                    grams.push(s.scaled(r.alpha));
                }
                Ok(OperatorGrad { input, alpha: alpha_bar, axis_grams: grams })
            }
            Self::Truncated(r) => {
                let s = r.iterates(x)?;
                let k = &r.axis_grams;
                let mut input = LatentTensor::zeros(x.axis_sizes().to_vec(), x.channels());
                let mut alpha_bar = 0.0;
                let mut grams: Vec<DenseMatrix> = k.iter().map(|g| DenseMatrix::zeros(g.rows(), g.cols())).collect();
                let mut s_bar = y_bar.clone();
                for step in (1..=r.order).rev() {
                    input.add_scaled(1.0, &s_bar)?;
                    let prev = &s[step - 1];
                    alpha_bar += s_bar.inner(&kron_apply(k, prev)?)?;
                    for (j, g) in grams.iter_mut().enumerate() {
                        let gj = mode_gram(&s_bar, &kron_apply_except(k, prev, j)?, j)?;
                        *g = g.add(&gj.scaled(r.alpha))?;
                    }
                    let mut next = kron_apply(k, &s_bar)?;
                    next.scale(r.alpha);
                    s_bar = next;
                }
                input.add_scaled(1.0, &s_bar)?;
                Ok(OperatorGrad { input, alpha: alpha_bar, axis_grams: grams })
            }
            Self::Dense { matrix, axis_sizes } => {
                check_tensor(axis_sizes, y_bar)?;
                let y = matrix.matmul_tn(&y_bar.clone().into_matrix())?;
                Ok(OperatorGrad {
                    input: LatentTensor::from_matrix(axis_sizes.clone(), y)?,
                    alpha: 0.0,
                    axis_grams: Vec::new(),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k2() -> DenseMatrix {
        DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]])
    }

    fn tensor(sizes: Vec<usize>, h: usize, seed: u64) -> LatentTensor {
        let m: usize = sizes.iter().product();
        let mut s = seed;
        let vals = (0..m * h)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
            })
            .collect();
        LatentTensor::new(sizes, h, vals).unwrap()
    }

    #[test]
    fn vanilla_weights() {
        let r = build_vanilla(&[k2()], 0.0).unwrap();
        assert!(r.diag_weights().iter().all(|&w| w == 1.0));
        let r = build_vanilla(&[DenseMatrix::from_rows(&[vec![1.0]])], -0.5).unwrap();
        assert!((r.diag_weights()[0] - 2.0 / 3.0).abs() < 1e-15);
        let r = build_vanilla(&[k2(), k2()], 0.4).unwrap();
        let w = r.diag_weights();
        assert!((w[3] - 10.0).abs() < 1e-9);
        assert!((w[0] - 1.0 / (1.0 - 0.4 * 0.25)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (1.0 - 0.4 * 0.75)).abs() < 1e-12);
    }

    #[test]
    fn vanilla_singular_diagonal() {
        let k = DenseMatrix::from_rows(&[vec![2.0]]);
        assert!(matches!(build_vanilla(&[k], 0.5), Err(ResolventError::SingularDiagonal { .. })));
    }

    #[test]
    fn vanilla_matches_dense() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 0.3, 0.1], vec![0.3, 1.5, 0.2], vec![0.1, 0.2, 1.0]]);
        let b = DenseMatrix::from_rows(&[vec![1.0, 0.4, 0.0], vec![0.4, 1.2, 0.3], vec![0.0, 0.3, 0.8]]);
        let t = tensor(vec![3, 3], 2, 5);
        let r = build_vanilla(&[a.clone(), b.clone()], -0.7).unwrap();
        let fast = apply_vanilla(&r, &t).unwrap();
        let naive = apply_naive_inverse(&[a, b], -0.7, &t, DEFAULT_NAIVE_CAP).unwrap();
        assert!(fast.max_abs_diff(&naive).unwrap() < 1e-12);
    }

    #[test]
    fn tp_factors_closed_form() {
        let r = build_tp(&[k2(), k2()], -1.0).unwrap();
        // I - (-1)K = [[2, 0.5], [0.5, 2]] with determinant 3.75.
        let expect = DenseMatrix::from_rows(&[vec![2.0, -0.5], vec![-0.5, 2.0]]).scaled(1.0 / 3.75);
        for f in r.axis_inverses() {
            assert!(f.max_abs_diff(&expect).unwrap() < 1e-14);
        }
        let r = build_tp(&[k2()], 0.0).unwrap();
        assert!(r.axis_inverses()[0].max_abs_diff(&DenseMatrix::identity(2)).unwrap() == 0.0);
        let k = DenseMatrix::from_rows(&[vec![1.0]]);
        assert!(matches!(build_tp(&[k2(), k], 1.0), Err(ResolventError::SingularAxis { axis: 1 })));
    }

    #[test]
    fn truncated_scalar() {
        let k = DenseMatrix::from_rows(&[vec![1.0]]);
        let t = LatentTensor::new(vec![1], 1, vec![1.0]).unwrap();
        let p0 = TruncatedPropagator::new(&[k.clone()], -0.5, 0).unwrap();
        assert_eq!(apply_truncated(&p0, &t).unwrap(), t);
        let p1 = TruncatedPropagator::new(&[k], -0.5, 1).unwrap();
        assert_eq!(apply_truncated(&p1, &t).unwrap().values(), &[0.5]);
    }

    #[test]
    fn naive_cap() {
        let big = DenseMatrix::identity(200);
        let t = LatentTensor::zeros(vec![200, 100], 1);
        assert!(matches!(
            apply_naive_inverse(&[big.clone(), DenseMatrix::identity(100)], 0.1, &t, DEFAULT_NAIVE_CAP),
            Err(ResolventError::CapExceeded { m: 20000, .. })
        ));
    }

    #[test]
    fn convergence_flags() {
        let r = convergence_report(&[k2()], 0.0).unwrap();
        assert!(r.positive_series_converges && !r.inverse_series_converges);
        let r = convergence_report(&[k2()], -0.6).unwrap();
        assert!((r.rho_alpha_k - 0.9).abs() < 1e-12);
        assert!((r.abs_alpha_lambda_min - 0.3).abs() < 1e-12);
        assert!(r.positive_series_converges && !r.inverse_series_converges);
        let k = DenseMatrix::from_rows(&[vec![2.5, 0.5], vec![0.5, 2.5]]);
        let r = convergence_report(&[k], -1.0).unwrap();
        assert!((r.abs_alpha_lambda_min - 2.0).abs() < 1e-12 && (r.rho_alpha_k - 3.0).abs() < 1e-12);
        assert!(!r.positive_series_converges && r.inverse_series_converges);
    }

    #[test]
    fn inverse_power_scalar() {
        let k = DenseMatrix::from_rows(&[vec![2.0]]);
        let sums = inverse_power_partial_sums(&[k], 1.0, 3, 16).unwrap();
        for (s, e) in sums.iter().zip([-0.5, -0.75, -0.875]) {
            assert!((s.get(0, 0) - e).abs() < 1e-15);
        }
    }

    #[test]
    fn variant_parse() {
        assert_eq!(Variant::parse("tp"), Some(Variant::Tp));
        assert_eq!(Variant::parse("truncated(3)"), Some(Variant::Truncated(3)));
        assert_eq!(Variant::parse("truncated:1"), Some(Variant::Truncated(1)));
        assert_eq!(Variant::parse("nope"), None);
        assert_eq!(Variant::parse(&Variant::Truncated(2).label()), Some(Variant::Truncated(2)));
    }

    #[test]
    fn dense_operator_matches_kron_paths() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.2], vec![0.2, 0.9]]);
        let b = DenseMatrix::from_rows(&[vec![0.8, 0.1, 0.0], vec![0.1, 1.1, 0.3], vec![0.0, 0.3, 0.7]]);
        let k = kron_materialize(&[a.clone(), b.clone()]).unwrap();
        let t = tensor(vec![2, 3], 2, 9);
        for v in [Variant::Vanilla, Variant::Truncated(0), Variant::Truncated(3)] {
            let fast = GridOperator::build(v, &[a.clone(), b.clone()], -0.4).unwrap();
            let dense = GridOperator::build_dense(v, &k, -0.4, vec![2, 3]).unwrap();
            let d = fast.apply(&t).unwrap().max_abs_diff(&dense.apply(&t).unwrap()).unwrap();
            assert!(d < 1e-12, "{v:?}: {d}");
        }
    }

    fn fd_check(variant: Variant) {
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.3, 0.1], vec![0.3, 0.9, 0.2], vec![0.1, 0.2, 1.1]]);
        let b = DenseMatrix::from_rows(&[vec![0.7, 0.25], vec![0.25, 0.6]]);
        let alpha = -0.8;
        let x = tensor(vec![3, 2], 2, 3);
        let w = tensor(vec![3, 2], 2, 4);
        let f = |grams: &[DenseMatrix], al: f64, xx: &LatentTensor| -> f64 {
            GridOperator::build(variant, grams, al).unwrap().apply(xx).unwrap().inner(&w).unwrap()
        };
        let op = GridOperator::build(variant, &[a.clone(), b.clone()], alpha).unwrap();
        let y = op.apply(&x).unwrap();
        let g = op.backward(&x, &y, &w).unwrap();
        let h = 1e-6;
        let fa = (f(&[a.clone(), b.clone()], alpha + h, &x) - f(&[a.clone(), b.clone()], alpha - h, &x)) / (2.0 * h);
        assert!((fa - g.alpha).abs() < 1e-7, "{variant:?} alpha {fa} vs {}", g.alpha);
        // Perturb a symmetric pair of entries of the first Gram.
        let mut ap = a.clone();
        let mut am = a.clone();
        for (i, j) in [(0, 1), (1, 0)] {
            ap.add_at(i, j, h);
            am.add_at(i, j, -h);
        }
        let fk = (f(&[ap, b.clone()], alpha, &x) - f(&[am, b.clone()], alpha, &x)) / (2.0 * h);
        let gk = g.axis_grams[0].get(0, 1) + g.axis_grams[0].get(1, 0);
        assert!((fk - gk).abs() < 1e-7, "{variant:?} gram {fk} vs {gk}");
        let mut xp = x.clone();
        xp.values_mut()[5] += h;
        let mut xm = x.clone();
        xm.values_mut()[5] -= h;
        let fx = (f(&[a.clone(), b.clone()], alpha, &xp) - f(&[a, b], alpha, &xm)) / (2.0 * h);
        assert!((fx - g.input.values()[5]).abs() < 1e-7);
    }

    #[test]
    fn backward_matches_finite_differences() {
        fd_check(Variant::Vanilla);
        fd_check(Variant::Tp);
        fd_check(Variant::Truncated(3));
        fd_check(Variant::Truncated(0));
    }

    #[test]
    fn vanilla_store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_vanilla(&[k2(), DenseMatrix::from_rows(&[vec![1.0, 0.1], vec![0.1, 2.0]])], -0.3).unwrap();
        r.save(dir.path()).unwrap();
        let back = ResolventVanilla::load(dir.path()).unwrap();
        assert_eq!(back, r);
        let t = tensor(vec![2, 2], 3, 1);
        assert_eq!(apply_vanilla(&back, &t).unwrap(), apply_vanilla(&r, &t).unwrap());
    }
}
