//! `verify`: oracle-equivalence, convergence, positive-definiteness and
//! gradient suites, each reduced to a named check with a deviation and a
//! threshold.

use std::time::Instant;

use serde::Serialize;

use ikno_core::kernels::{axis_gram, cross_kernel, grid_linspace, AxisKernelParams};
use ikno_core::linalg::{sym_eig, DenseMatrix, LatentTensor};
use ikno_core::model::{IknoModel, ModelConfig, ProcessorKind};
use ikno_core::resolvent::{
    apply_naive_inverse, build_vanilla, convergence_report, inverse_power_partial_sums, naive_resolvent_matrix,
    GridOperator, TruncatedPropagator, DEFAULT_NAIVE_CAP,
};
use ikno_core::rng::Rng64;
use ikno_core::store::TensorStore;
use ikno_core::train::{batch_loss_sum, grad_analytic, grad_fd, Example};
use ikno_core::{PointCloud, PointSet, Variant};

use crate::{CliError, Result, RunConfig};

pub const KEYS: &[&str] = &["cases", "inject_fault"];
pub const DEFAULT_CASES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    None,
    /// Substitutes the TP operator where the Vanilla fast path is expected.
    TpAsVanilla,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Self::None),
            "tp-as-vanilla" => Some(Self::TpAsVanilla),
            _ => None,
        }
    }
}

/// How a deviation is compared with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub deviation: f64,
    pub threshold: f64,
    pub relation: Relation,
    pub seconds: f64,
    pub detail: String,
}

impl Check {
    fn new(name: &str, cases: usize, deviation: f64, threshold: f64, relation: Relation, start: Instant) -> Self {
        let passed = match relation {
            Relation::AtMost => deviation <= threshold,
            Relation::Above => deviation > threshold,
        };
        Self {
            name: name.to_string(),
            passed,
            cases,
            deviation,
            threshold,
            relation,
            seconds: start.elapsed().as_secs_f64(),
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: String) -> Self {
        self.detail = detail;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub cases: usize,
    pub seed: u64,
    pub fault: Fault,
    pub passed: bool,
    pub failed: Vec<String>,
    pub checks: Vec<Check>,
}

pub fn random_spd(n: usize, rng: &mut Rng64) -> DenseMatrix {
    let b = DenseMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0));
    let mut a = b.matmul_nt(&b).expect("square").scaled(1.0 / n as f64);
    for i in 0..n {
        a.add_at(i, i, 0.1);
    }
    a
}

fn random_tensor(sizes: &[usize], channels: usize, rng: &mut Rng64) -> LatentTensor {
    let m: usize = sizes.iter().product();
    LatentTensor::new(sizes.to_vec(), channels, (0..m * channels).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .expect("consistent sizes")
}

/// A random oracle instance: SPD axis Grams on `N_j <= 8` points and α from
/// `[-2, 0)` or `(0, 0.9 / ρ(K)]`.
pub struct OracleCase {
    pub grams: Vec<DenseMatrix>,
    pub alpha: f64,
    pub input: LatentTensor,
}

pub fn oracle_case(seed: u64, index: u64, d: usize) -> Result<OracleCase> {
    let mut rng = Rng64::child(seed, index);
    let sizes: Vec<usize> = (0..d).map(|_| 1 + rng.below(8) as usize).collect();
    let grams: Vec<DenseMatrix> = sizes.iter().map(|&n| random_spd(n, &mut rng)).collect();
    let u = rng.next_f64();
    let alpha = if rng.below(2) == 0 {
        -2.0 * (1.0 - u)
    } else {
        let rho = convergence_report(&grams, 1.0)?.rho_alpha_k;
        0.9 / rho * (1.0 - u)
    };
    let input = random_tensor(&sizes, 2, &mut rng);
    Ok(OracleCase { grams, alpha, input })
}

/// Worst `‖fast - dense‖_max / (1 + ‖t‖_max)` over `cases` instances of dimension `d`.
pub fn oracle_equivalence(seed: u64, cases: usize, d: usize, fault: Fault) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let c = oracle_case(seed, (d * 1_000_000 + i) as u64, d)?;
        let variant = match fault {
            Fault::None => Variant::Vanilla,
            Fault::TpAsVanilla => Variant::Tp,
        };
        let fast = GridOperator::build(variant, &c.grams, c.alpha)?.apply(&c.input)?;
        let dense = apply_naive_inverse(&c.grams, c.alpha, &c.input, DEFAULT_NAIVE_CAP)?;
        let dev = fast.max_abs_diff(&dense)?;
        worst = worst.max(dev / (1.0 + c.input.max_abs()));
    }
    Ok(worst)
}

/// Worst `‖TP - Vanilla‖_max` over one-dimensional instances.
pub fn d1_coincidence(seed: u64, cases: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..cases {
        let c = oracle_case(seed, 7_000_000 + i as u64, 1)?;
        let v = GridOperator::build(Variant::Vanilla, &c.grams, c.alpha)?.apply(&c.input)?;
        let p = GridOperator::build(Variant::Tp, &c.grams, c.alpha)?.apply(&c.input)?;
        worst = worst.max(v.max_abs_diff(&p)?);
    }
    Ok(worst)
}

/// The stored d=2 instance on which TP and Vanilla differ.
pub fn d2_witness_gap() -> Result<f64> {
    let k = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
    let grams = vec![k.clone(), k];
    let t = LatentTensor::new(vec![2, 2], 1, vec![1.0, 0.0, 0.0, 0.0]).expect("2x2 impulse");
    let v = GridOperator::build(Variant::Vanilla, &grams, -1.0)?.apply(&t)?;
    let p = GridOperator::build(Variant::Tp, &grams, -1.0)?.apply(&t)?;
    Ok(v.max_abs_diff(&p)?)
}

/// A pinned resolvent instance: axis Grams from a fixed product kernel on an
/// equispaced grid, with α.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredInstance {
    pub name: &'static str,
    pub grams: Vec<DenseMatrix>,
    pub alpha: f64,
}

impl StoredInstance {
    pub fn to_store(&self) -> Result<TensorStore> {
        let mut s = TensorStore::new("resolvent-instance");
        s.dim = Some(self.grams.len());
        let rep = convergence_report(&self.grams, self.alpha)?;
        s.meta = serde_json::json!({ "name": self.name, "alpha": self.alpha, "convergence": rep });
        for (j, g) in self.grams.iter().enumerate() {
            s.put(&format!("gram_{j}"), vec![g.rows(), g.cols()], g.values().to_vec())?;
        }
        Ok(s)
    }
}

fn pinned_grams(d: usize, n: usize, p: AxisKernelParams) -> Result<Vec<DenseMatrix>> {
    let grid = grid_linspace(d, n, -1.0, 1.0)?;
    Ok((0..d).map(|j| axis_gram(&p, grid.axis(j)).0).collect())
}

fn lambda_min(grams: &[DenseMatrix]) -> Result<f64> {
    Ok(convergence_report(grams, 1.0)?.abs_alpha_lambda_min)
}

/// ρ(αK) = 0.9 with α > 0, where the top eigenvalue of αK is +ρ and the
/// tail bound `ρ^{p+1} / (1 - ρ)` is attained. With α < 0 the same tail is
/// smaller by `(1 - ρ) / (1 + ρ)`.
pub fn neumann_instance() -> Result<StoredInstance> {
    let grams = pinned_grams(2, 5, AxisKernelParams::new(0.5, 3.0, 2.0)?)?;
    let rho = convergence_report(&grams, 1.0)?.rho_alpha_k;
    Ok(StoredInstance { name: "neumann", grams, alpha: 0.9 / rho })
}

/// |α|λ_min(K) = 2 with α < 0: the inverse-power series converges.
pub fn inverse_power_instance() -> Result<StoredInstance> {
    let grams = pinned_grams(2, 4, AxisKernelParams::new(1.0, 6.0, 8.0)?)?;
    let lmin = lambda_min(&grams)?;
    Ok(StoredInstance { name: "inverse-power", grams, alpha: -2.0 / lmin })
}

/// |α|λ_min(K) = 0.5 with α > 0: the inverse-power series diverges.
pub fn divergent_instance() -> Result<StoredInstance> {
    let grams = pinned_grams(2, 4, AxisKernelParams::new(1.0, 6.0, 8.0)?)?;
    let lmin = lambda_min(&grams)?;
    Ok(StoredInstance { name: "inverse-power-divergent", grams, alpha: 0.5 / lmin })
}

fn identity_tensor(sizes: &[usize]) -> LatentTensor {
    let m: usize = sizes.iter().product();
    LatentTensor::from_matrix(sizes.to_vec(), DenseMatrix::identity(m)).expect("M x M identity")
}

fn spectral_norm_sym(a: &DenseMatrix) -> Result<f64> {
    Ok(sym_eig(a)?.max_abs_eigenvalue())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NeumannRow {
    pub p: usize,
    pub deviation: f64,
    pub bound: f64,
    pub ratio: f64,
}

/// `‖R_p - (I - αK)⁻¹‖₂` against `ρ^{p+1} / (1 - ρ)`.
pub fn neumann_tail(inst: &StoredInstance, orders: &[usize]) -> Result<(f64, Vec<NeumannRow>)> {
    let rho = convergence_report(&inst.grams, inst.alpha)?.rho_alpha_k;
    let exact = naive_resolvent_matrix(&inst.grams, inst.alpha, DEFAULT_NAIVE_CAP)?;
    let sizes: Vec<usize> = inst.grams.iter().map(DenseMatrix::rows).collect();
    let eye = identity_tensor(&sizes);
    let mut rows = Vec::new();
    for &p in orders {
        let rp = TruncatedPropagator::new(&inst.grams, inst.alpha, p)?;
        let rp = ikno_core::resolvent::apply_truncated(&rp, &eye)?.into_matrix();
        let diff = rp.sub(&exact)?;
        let deviation = spectral_norm_sym(&diff)?;
        let bound = rho.powi(p as i32 + 1) / (1.0 - rho);
        rows.push(NeumannRow { p, deviation, bound, ratio: deviation / bound });
    }
    Ok((rho, rows))
}

/// Max-abs deviation of each inverse-power partial sum from the dense
/// resolvent and the Frobenius norm of each partial sum.
pub fn inverse_power_trace(inst: &StoredInstance, terms: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let exact = naive_resolvent_matrix(&inst.grams, inst.alpha, DEFAULT_NAIVE_CAP)?;
    let sums = inverse_power_partial_sums(&inst.grams, inst.alpha, terms, DEFAULT_NAIVE_CAP)?;
    let mut devs = Vec::with_capacity(terms);
    let mut norms = Vec::with_capacity(terms);
    for s in &sums {
        devs.push(s.max_abs_diff(&exact)?);
        norms.push(s.frobenius());
    }
    Ok((devs, norms))
}

/// Worst `-λ_min / trace` over random kernel parameterizations on at most
/// 16 distinct points in up to three dimensions.
pub fn gram_pd_margin(seed: u64, cases: usize) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..cases {
        let mut rng = Rng64::child(seed, 9_000_000 + i as u64);
        let d = 1 + rng.below(3) as usize;
        let n = 1 + rng.below(16) as usize;
        let axes: Vec<AxisKernelParams> = (0..d)
            .map(|_| AxisKernelParams::new(rng.uniform(0.05, 5.0), rng.uniform(0.05, 10.0), rng.uniform(0.05, 10.0)))
            .collect::<std::result::Result<_, _>>()?;
        let coords: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let cloud = PointCloud::from_coords(d, coords)?;
        let k = cross_kernel(&axes, &cloud, &cloud)?;
        let trace: f64 = (0..cloud.len()).map(|i| k.get(i, i)).sum();
        let lmin = sym_eig(&k)?.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        worst = worst.max(-lmin / trace);
    }
    Ok(worst)
}

pub fn toy_gradient_config() -> ModelConfig {
    ModelConfig {
        dim: 2,
        grid_l: 4,
        hidden: 8,
        branches: 2,
        processor: ProcessorKind::Identity,
        variant: Variant::Tp,
        head_depth: 2,
        init_scales: vec![1.0, 2.0],
        ..ModelConfig::default()
    }
}

pub fn toy_batch(seed: u64, n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let mut rng = Rng64::child(seed, i as u64);
            let coords: Vec<f64> = (0..2 * 9).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let vals: Vec<f64> = coords.chunks(2).map(|p| (2.0 * p[0]).sin() + p[1] * p[1]).collect();
            let input = PointCloud::new(2, coords, 1, vals).expect("9 points");
            let qc: Vec<f64> = (0..2 * 6).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let t: Vec<f64> = qc.chunks(2).map(|p| p[0] * p[1] + 0.3).collect();
            let queries = PointCloud::from_coords(2, qc).expect("6 points");
            Example { input, queries, target: DenseMatrix::new(6, 1, t).expect("6 targets") }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheck {
    pub params: usize,
    /// Coordinates with `|FD| >= 1e-6`.
    pub checked: usize,
    pub worst_relative: f64,
    /// Worst absolute disagreement on the remaining coordinates.
    pub worst_small_absolute: f64,
}

pub fn gradient_check(cfg: ModelConfig, seed: u64) -> Result<GradientCheck> {
    let model = IknoModel::new(cfg)?;
    let params = model.init_params(seed);
    let batch = toy_batch(seed + 100, 2);
    let (_, g) = grad_analytic(&model, &params, &batch)?;
    let mut p = params.clone();
    let mut failure = None;
    let fd = grad_fd(
        |v| {
            p.values.copy_from_slice(v);
            batch_loss_sum(&model, &p, &batch).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        },
        &params.values,
        1e-6,
    );
    if let Some(e) = failure {
        return Err(e.into());
    }
    let fd = fd?;
    let mut out = GradientCheck { params: params.len(), checked: 0, worst_relative: 0.0, worst_small_absolute: 0.0 };
    for (a, f) in g.iter().zip(&fd) {
        if f.abs() >= 1e-6 {
            out.checked += 1;
            out.worst_relative = out.worst_relative.max((a - f).abs() / f.abs());
        } else {
            out.worst_small_absolute = out.worst_small_absolute.max((a - f).abs());
        }
    }
    Ok(out)
}

/// Runs every suite. Each check reports its own deviation; the report is
/// complete even when some checks fail.
pub fn run_suites(seed: u64, cases: usize, fault: Fault) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    for d in 1..=3 {
        let t = Instant::now();
        let dev = oracle_equivalence(seed, cases, d, fault)?;
        checks.push(Check::new(&format!("oracle_equivalence_d{d}"), cases, dev, 1e-8, Relation::AtMost, t));
    }

    let t = Instant::now();
    let mut min_weight = f64::INFINITY;
    let mut max_weight = f64::NEG_INFINITY;
    for i in 0..cases {
        let mut rng = Rng64::child(seed, 8_000_000 + i as u64);
        let d = 1 + rng.below(3) as usize;
        let grams: Vec<DenseMatrix> = (0..d).map(|_| random_spd(1 + rng.below(8) as usize, &mut rng)).collect();
        let r = build_vanilla(&grams, -2.0 * (1.0 - rng.next_f64()))?;
        for &w in r.diag_weights() {
            min_weight = min_weight.min(w);
            max_weight = max_weight.max(w);
        }
    }
    let excess = (max_weight - 1.0).max(0.0) + if min_weight > 0.0 { 0.0 } else { 1.0 };
    checks.push(
        Check::new("negative_alpha_weights", cases, excess, 0.0, Relation::AtMost, t)
            .with_detail(format!("diag weights in [{min_weight:e}, {max_weight:e}]")),
    );

    let t = Instant::now();
    let dev = d1_coincidence(seed, cases)?;
    checks.push(Check::new("tp_vanilla_d1_coincidence", cases, dev, 1e-10, Relation::AtMost, t));

    let t = Instant::now();
    let gap = d2_witness_gap()?;
    checks.push(Check::new("tp_vanilla_d2_witness_gap", 1, gap, 1e-3, Relation::Above, t));

    let t = Instant::now();
    let inst = neumann_instance()?;
    let (rho, rows) = neumann_tail(&inst, &[1, 5, 10, 20, 50])?;
    let worst_factor = rows.iter().map(|r| r.ratio.max(1.0 / r.ratio)).fold(0.0, f64::max);
    let rho_off = (rho - 0.9).abs();
    checks.push(
        Check::new("neumann_tail_bound", rows.len(), worst_factor.max(if rho_off <= 0.02 { 1.0 } else { f64::INFINITY }), 3.0, Relation::AtMost, t)
            .with_detail(format!(
                "rho={rho:.6}; ratios {}",
                rows.iter().map(|r| format!("p{}:{:.3}", r.p, r.ratio)).collect::<Vec<_>>().join(" ")
            )),
    );

    let t = Instant::now();
    let inst = inverse_power_instance()?;
    let rep = convergence_report(&inst.grams, inst.alpha)?;
    let (devs, _) = inverse_power_trace(&inst, 25)?;
    let reached = devs.iter().position(|&e| e <= 1e-6).map(|i| i + 1);
    let off = (rep.abs_alpha_lambda_min - 2.0).abs();
    checks.push(
        Check::new(
            "inverse_power_convergence",
            25,
            if off <= 0.1 { devs[24] } else { f64::INFINITY },
            1e-6,
            Relation::AtMost,
            t,
        )
        .with_detail(format!("|alpha|lambda_min={:.6}; first term within 1e-6: {reached:?}", rep.abs_alpha_lambda_min)),
    );

    let t = Instant::now();
    let inst = divergent_instance()?;
    let rep = convergence_report(&inst.grams, inst.alpha)?;
    let (_, norms) = inverse_power_trace(&inst, 25)?;
    let non_increasing = norms.windows(2).filter(|w| w[1] <= w[0]).count();
    let bad = if rep.abs_alpha_lambda_min < 1.0 { non_increasing as f64 } else { f64::INFINITY };
    checks.push(
        Check::new("inverse_power_divergence", 25, bad, 0.0, Relation::AtMost, t).with_detail(format!(
            "|alpha|lambda_min={:.6}; partial-sum norm {:.3e} -> {:.3e}",
            rep.abs_alpha_lambda_min, norms[0], norms[24]
        )),
    );

    let t = Instant::now();
    let pd_cases = 2 * cases.max(DEFAULT_CASES);
    let margin = gram_pd_margin(seed, pd_cases)?;
    checks.push(Check::new("gram_positive_definite", pd_cases, margin, 1e-10, Relation::AtMost, t));

    let t = Instant::now();
    let g = gradient_check(toy_gradient_config(), 3)?;
    let too_big = if g.params <= 600 { 0.0 } else { f64::INFINITY };
    checks.push(
        Check::new("gradient_relative", g.checked, g.worst_relative + too_big, 1e-4, Relation::AtMost, t).with_detail(
            format!("{} params, {} coordinates with |FD| >= 1e-6", g.params, g.checked),
        ),
    );
    let t2 = Instant::now();
    checks.push(Check::new(
        "gradient_small_absolute",
        g.params - g.checked,
        g.worst_small_absolute,
        1e-6,
        Relation::AtMost,
        t2,
    ));

    Ok(checks)
}

fn save_instances(cfg: &RunConfig) -> Result<()> {
    for inst in [neumann_instance()?, inverse_power_instance()?, divergent_instance()?] {
        inst.to_store()?.save(&cfg.out.join("instances").join(inst.name))?;
    }
    Ok(())
}

/// Runs the suites and writes `verify.json`. Failing checks are reported in
/// the returned report; callers decide the exit code from `passed`.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport> {
    let cases = cfg.get("cases", DEFAULT_CASES)?;
    if cases == 0 {
        return Err(CliError::Config("cases must be positive".into()));
    }
    let fault = match cfg.raw("inject_fault") {
        None => Fault::None,
        Some(s) => Fault::parse(s).ok_or_else(|| CliError::Config(format!("inject_fault: unknown fault `{s}`")))?,
    };
    let checks = run_suites(cfg.seed, cases, fault)?;
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    let report = VerifyReport { cases, seed: cfg.seed, fault, passed: failed.is_empty(), failed, checks };
    save_instances(cfg)?;
    crate::write_json(&cfg.out.join("verify.json"), &report)?;
    Ok(report)
}
