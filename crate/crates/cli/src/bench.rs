//! `bench`: build and apply timings of the fast resolvents against the dense
//! inverse, with speedups and log-log scaling fits.

use std::time::Instant;

use serde::Serialize;

use ikno_core::kernels::{axis_gram, grid_linspace, AxisKernelParams};
use ikno_core::linalg::{dense_inverse, kron_materialize, DenseMatrix, LatentTensor};
use ikno_core::resolvent::{apply_dense, naive_resolvent_matrix, GridOperator, DEFAULT_NAIVE_CAP};
use ikno_core::rng::Rng64;
use ikno_core::train::median;
use ikno_core::model::{IknoModel, ModelConfig};
use ikno_core::{PointCloud, Variant};

use crate::{CliError, Result, RunConfig};

pub const KEYS: &[&str] = &["sizes", "dims", "reps", "warmups", "channels", "naive_cap", "alpha", "sweep_n"];

pub const MIN_WARMUPS: usize = 2;
pub const MIN_REPS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub hardware_threads: usize,
    pub thread_cap: usize,
    pub debug_assertions: bool,
    /// Peak resident set in KiB after the run, where the platform exposes it.
    pub peak_rss_kib: Option<u64>,
    /// Memory figures depend on the host and are not compared across machines.
    pub memory_host_specific: bool,
}

impl Environment {
    pub fn capture() -> Result<Self> {
        Ok(Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            hardware_threads: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            thread_cap: crate::config::thread_cap()?,
            debug_assertions: cfg!(debug_assertions),
            peak_rss_kib: peak_rss_kib(),
            memory_host_specific: true,
        })
    }
}

/// `VmHWM` from `/proc/self/status`.
fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCase {
    pub variant: String,
    pub grid_shape: Vec<usize>,
    pub m: usize,
    pub channels: usize,
    pub build_time_ns: Option<f64>,
    pub apply_time_ns: Option<f64>,
    pub warmups: usize,
    pub repetitions: usize,
    /// Max-abs deviation from the dense oracle of the same operator.
    pub max_deviation: Option<f64>,
    /// Set when the row was skipped, e.g. `CapExceeded`.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Speedup {
    pub grid_shape: Vec<usize>,
    pub variant: String,
    /// Naive build+apply over fast build+apply.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub variant: String,
    /// What varies along the sweep.
    pub sweep: String,
    pub points: Vec<(usize, f64)>,
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DoublingRatio {
    pub dim: usize,
    pub n_from: usize,
    pub n_to: usize,
    pub variant: String,
    pub build_ratio: f64,
    /// `2^{3d}` for the dense inverse, `2³` for the per-axis paths.
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub seed: u64,
    pub alpha: f64,
    pub cases: Vec<BenchCase>,
    pub speedups: Vec<Speedup>,
    pub exponents: Vec<ScalingFit>,
    pub doubling: Vec<DoublingRatio>,
    /// Largest `max(vanilla, tp) / min(vanilla, tp)` apply-time ratio.
    pub vanilla_tp_apply_ratio: f64,
    /// Whole-model forward time per sample with each propagator, for context.
    pub model_forward: Vec<ModelForward>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelForward {
    pub variant: String,
    pub grid_shape: Vec<usize>,
    pub forward_time_ns: f64,
}

/// Median forward time of the default model on one 128-point sample.
pub fn model_forward_times(s: &BenchSettings, seed: u64) -> Result<Vec<ModelForward>> {
    let mut rng = Rng64::child(seed, 77);
    let n = 128;
    let coords: Vec<f64> = (0..2 * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let vals: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let input = PointCloud::new(2, coords.clone(), 1, vals)?;
    let queries = PointCloud::from_coords(2, coords)?;
    let mut out = Vec::new();
    for variant in [Variant::Vanilla, Variant::Tp] {
        let cfg = ModelConfig { variant, ..ModelConfig::default() };
        let grid_shape = vec![cfg.grid_l; cfg.dim];
        let model = IknoModel::new(cfg)?;
        let params = model.init_params(seed);
        let (ns, _) = time_median_ns(s.warmups, s.reps, || Ok(model.forward(&params, &input, &queries)?))?;
        out.push(ModelForward { variant: variant.label(), grid_shape, forward_time_ns: ns });
    }
    Ok(out)
}

/// Median of `reps` timed calls after `warmups` untimed ones.
pub fn time_median_ns<T>(warmups: usize, reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(f64, T)> {
    for _ in 0..warmups {
        std::hint::black_box(f()?);
    }
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let t = Instant::now();
        let out = std::hint::black_box(f()?);
        times.push(t.elapsed().as_nanos() as f64);
        last = Some(out);
    }
    let out = last.ok_or_else(|| CliError::Config("reps must be positive".into()))?;
    Ok((median(&times).unwrap_or(f64::NAN), out))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn bench_grams(d: usize, n: usize) -> Result<Vec<DenseMatrix>> {
    let grid = grid_linspace(d, n, -1.0, 1.0)?;
    let p = AxisKernelParams::new(1.0, 2.0, 2.0)?;
    Ok((0..d).map(|j| axis_gram(&p, grid.axis(j)).0).collect())
}

#[derive(Debug, Clone, Copy)]
pub struct BenchSettings {
    pub warmups: usize,
    pub reps: usize,
    pub channels: usize,
    pub naive_cap: usize,
    pub alpha: f64,
}

/// Vanilla, TP and naive rows for one grid.
pub fn bench_grid(d: usize, n: usize, s: &BenchSettings, seed: u64) -> Result<Vec<BenchCase>> {
    let grams = bench_grams(d, n)?;
    let sizes = vec![n; d];
    let m: usize = sizes.iter().product();
    let mut rng = Rng64::child(seed, (d * 1000 + n) as u64);
    let t = LatentTensor::new(sizes.clone(), s.channels, (0..m * s.channels).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let case = |variant: &str| BenchCase {
        variant: variant.to_string(),
        grid_shape: sizes.clone(),
        m,
        channels: s.channels,
        build_time_ns: None,
        apply_time_ns: None,
        warmups: s.warmups,
        repetitions: s.reps,
        max_deviation: None,
        skipped: None,
    };

    let mut naive_row = case("naive");
    let naive = if m <= s.naive_cap {
        let (build, inv) = time_median_ns(s.warmups, s.reps, || Ok(naive_resolvent_matrix(&grams, s.alpha, s.naive_cap)?))?;
        let (apply, y) = time_median_ns(s.warmups, s.reps, || Ok(apply_dense(&inv, &t)?))?;
        naive_row.build_time_ns = Some(build);
        naive_row.apply_time_ns = Some(apply);
        Some(y)
    } else {
        naive_row.skipped = Some(format!("CapExceeded: M={m} > cap {}", s.naive_cap));
        None
    };

    let mut rows = Vec::new();
    for (label, variant) in [("vanilla", Variant::Vanilla), ("tp", Variant::Tp)] {
        let mut row = case(label);
        let (build, op) = time_median_ns(s.warmups, s.reps, || Ok(GridOperator::build(variant, &grams, s.alpha)?))?;
        let (apply, y) = time_median_ns(s.warmups, s.reps, || Ok(op.apply(&t)?))?;
        row.build_time_ns = Some(build);
        row.apply_time_ns = Some(apply);
        if m <= s.naive_cap {
            let oracle = match variant {
                Variant::Tp => {
                    let shifted: Vec<DenseMatrix> = grams
                        .iter()
                        .map(|g| {
                            let mut a = g.scaled(-s.alpha);
                            for i in 0..g.rows() {
                                a.add_at(i, i, 1.0);
                            }
                            dense_inverse(&a)
                        })
                        .collect::<std::result::Result<_, _>>()?;
                    apply_dense(&kron_materialize(&shifted)?, &t)?
                }
                _ => naive.clone().expect("naive ran within cap"),
            };
            row.max_deviation = Some(y.max_abs_diff(&oracle)?);
        }
        rows.push(row);
    }
    rows.push(naive_row);
    Ok(rows)
}

fn find<'a>(cases: &'a [BenchCase], variant: &str, d: usize, n: usize) -> Option<&'a BenchCase> {
    cases.iter().find(|c| c.variant == variant && c.grid_shape.len() == d && c.grid_shape.first() == Some(&n))
}

fn total(c: &BenchCase) -> Option<f64> {
    Some(c.build_time_ns? + c.apply_time_ns?)
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<BenchReport> {
    let s = BenchSettings {
        warmups: cfg.get("warmups", MIN_WARMUPS)?,
        reps: cfg.get("reps", MIN_REPS)?,
        channels: cfg.get("channels", 8usize)?,
        naive_cap: cfg.get("naive_cap", DEFAULT_NAIVE_CAP)?,
        alpha: cfg.get("alpha", -1.0f64)?,
    };
    if s.warmups < MIN_WARMUPS || s.reps < MIN_REPS {
        return Err(CliError::Config(format!("need warmups >= {MIN_WARMUPS} and reps >= {MIN_REPS}")));
    }
    if s.channels == 0 {
        return Err(CliError::Config("channels must be positive".into()));
    }
    let sizes: Vec<usize> = cfg.get_list("sizes", &[4, 8, 16])?;
    let dims: Vec<usize> = cfg.get_list("dims", &[1, 2, 3])?;
    let sweep_n: usize = cfg.get("sweep_n", 16)?;

    let mut cases = Vec::new();
    for &d in &dims {
        for &n in &sizes {
            log::info!("bench d={d} N={n}");
            cases.extend(bench_grid(d, n, &s, cfg.seed)?);
        }
    }

    let mut speedups = Vec::new();
    for &d in &dims {
        for &n in &sizes {
            let Some(naive) = find(&cases, "naive", d, n).and_then(total) else { continue };
            for v in ["vanilla", "tp"] {
                if let Some(fast) = find(&cases, v, d, n).and_then(total) {
                    speedups.push(Speedup { grid_shape: vec![n; d], variant: v.into(), speedup: naive / fast });
                }
            }
        }
    }

    let mut exponents = Vec::new();
    for v in ["vanilla", "tp"] {
        let pts: Vec<(usize, f64)> =
            dims.iter().filter_map(|&d| find(&cases, v, d, sweep_n).and_then(|c| Some((c.m, c.apply_time_ns?)))).collect();
        if pts.len() >= 2 {
            let fp: Vec<(f64, f64)> = pts.iter().map(|&(m, t)| (m as f64, t)).collect();
            exponents.push(ScalingFit { variant: v.into(), sweep: format!("N={sweep_n}, d varies"), exponent: loglog_slope(&fp), points: pts });
        }
        for &d in &dims {
            let pts: Vec<(usize, f64)> =
                sizes.iter().filter_map(|&n| find(&cases, v, d, n).and_then(|c| Some((c.m, c.apply_time_ns?)))).collect();
            if pts.len() >= 2 {
                let fp: Vec<(f64, f64)> = pts.iter().map(|&(m, t)| (m as f64, t)).collect();
                exponents.push(ScalingFit { variant: v.into(), sweep: format!("d={d}, N varies"), exponent: loglog_slope(&fp), points: pts });
            }
        }
    }

    let mut doubling = Vec::new();
    for &d in &dims {
        for &n in &sizes {
            if !sizes.contains(&(2 * n)) {
                continue;
            }
            for v in ["vanilla", "tp", "naive"] {
                let (Some(a), Some(b)) = (find(&cases, v, d, n), find(&cases, v, d, 2 * n)) else { continue };
                let (Some(ta), Some(tb)) = (a.build_time_ns, b.build_time_ns) else { continue };
                let expected = if v == "naive" { 8f64.powi(d as i32) } else { 8.0 };
                doubling.push(DoublingRatio { dim: d, n_from: n, n_to: 2 * n, variant: v.into(), build_ratio: tb / ta, expected });
            }
        }
    }

    let mut ratio = 1.0f64;
    for &d in &dims {
        for &n in &sizes {
            if let (Some(a), Some(b)) = (
                find(&cases, "vanilla", d, n).and_then(|c| c.apply_time_ns),
                find(&cases, "tp", d, n).and_then(|c| c.apply_time_ns),
            ) {
                ratio = ratio.max(a.max(b) / a.min(b));
            }
        }
    }

    let report = BenchReport {
        environment: Environment::capture()?,
        seed: cfg.seed,
        alpha: s.alpha,
        cases,
        speedups,
        exponents,
        doubling,
        vanilla_tp_apply_ratio: ratio,
        model_forward: model_forward_times(&s, cfg.seed)?,
    };
    crate::write_json(&cfg.out.join("bench.json"), &report)?;
    crate::write_csv(&cfg.out.join("bench.csv"), &report.cases.iter().map(CsvRow::from).collect::<Vec<_>>())?;
    Ok(report)
}

#[derive(Serialize)]
struct CsvRow {
    variant: String,
    grid_shape: String,
    m: usize,
    channels: usize,
    build_time_ns: Option<f64>,
    apply_time_ns: Option<f64>,
    warmups: usize,
    repetitions: usize,
    max_deviation: Option<f64>,
    skipped: Option<String>,
}

impl From<&BenchCase> for CsvRow {
    fn from(c: &BenchCase) -> Self {
        Self {
            variant: c.variant.clone(),
            grid_shape: c.grid_shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x"),
            m: c.m,
            channels: c.channels,
            build_time_ns: c.build_time_ns,
            apply_time_ns: c.apply_time_ns,
            warmups: c.warmups,
            repetitions: c.repetitions,
            max_deviation: c.max_deviation,
            skipped: c.skipped.clone(),
        }
    }
}
