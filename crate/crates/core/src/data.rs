//! Deterministic synthetic datasets with independent ground truth.
//!
//! * CSines: `u = Σ a_k ∏_j sin(π k_j (x_j + 1) / 2)` on `[-1, 1]²` with the
//!   source `f = -Δu` computed analytically.
//! * Poisson-Gauss: Gaussian sources, `u` from a 5-point finite-difference
//!   solve with zero Dirichlet data, read off at cloud points by bilinear
//!   interpolation.
//! * Toy trajectories: 1-D periodic advection `u(x, t) = u₀(x - v t)`, also
//!   flattened into a supervised dataset of all2all pairs.
//!
//! Every sample draws from its own child generator, so generation is a pure
//! function of the spec.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{KernelError, PointCloud, PointSet};
use crate::linalg::DenseMatrix;
use crate::rng::Rng64;
use crate::store::{StoreError, TensorStore};
use crate::train::{all2all_pairs, temporal_input, temporal_target, Example, TemporalMode, TrainError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("requested {requested} points but only {available} are available")]
    TooManyRequested { requested: usize, available: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub const DEFAULT_TRAIN: usize = 256;
pub const DEFAULT_TEST: usize = 64;
pub const CG_REL_TOL: f64 = 1e-10;

/// Where cloud points come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudSource {
    /// Nodes of the `res x res` grid on `[-1, 1]²`, without repetition.
    Grid { res: usize },
    /// Uniform draws from `[-1, 1]^dim`.
    Continuous { dim: usize },
}

/// `n` points from `source`: grid mode shuffles all nodes and keeps the first `n`.
pub fn subsample_cloud(source: CloudSource, n: usize, rng: &mut Rng64) -> Result<PointCloud> {
    match source {
        CloudSource::Grid { res } => {
            let available = res * res;
            if n > available {
                return Err(DataError::TooManyRequested { requested: n, available });
            }
            let mut idx: Vec<usize> = (0..available).collect();
            rng.shuffle(&mut idx);
            let h = 2.0 / (res - 1) as f64;
            let mut coords = Vec::with_capacity(2 * n);
            for &k in &idx[..n] {
                coords.push(-1.0 + (k / res) as f64 * h);
                coords.push(-1.0 + (k % res) as f64 * h);
            }
            Ok(PointCloud::from_coords(2, coords)?)
        }
        CloudSource::Continuous { dim } => {
            if n == 0 || dim == 0 {
                return Err(DataError::InvalidSpec("continuous clouds need n >= 1 and dim >= 1".into()));
            }
            let coords = (0..n * dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
            Ok(PointCloud::from_coords(dim, coords)?)
        }
    }
}

/// One supervised sample: conditions on the input cloud, targets at queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub input: PointCloud,
    pub queries: PointCloud,
    pub targets: DenseMatrix,
}

impl SampleRecord {
    pub fn to_example(&self) -> Example {
        Example { input: self.input.clone(), queries: self.queries.clone(), target: self.targets.clone() }
    }
}

/// Train and test splits plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: String,
    pub dim: usize,
    pub seed: u64,
    pub input_channels: Vec<String>,
    pub target_channels: Vec<String>,
    pub meta: serde_json::Value,
    pub train: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl Dataset {
    pub fn train_examples(&self) -> Vec<Example> {
        self.train.iter().map(SampleRecord::to_example).collect()
    }

    pub fn test_examples(&self) -> Vec<Example> {
        self.test.iter().map(SampleRecord::to_example).collect()
    }

    pub fn to_store(&self) -> Result<TensorStore> {
        let mut s = TensorStore::new(self.kind.clone());
        s.dim = Some(self.dim);
        s.seed = Some(self.seed);
        s.meta = self.meta.clone();
        s.channel_names.insert("input".into(), self.input_channels.clone());
        s.channel_names.insert("target".into(), self.target_channels.clone());
        for (split, recs) in [("train", &self.train), ("test", &self.test)] {
            s.counts.insert(split.into(), recs.len());
            let Some(first) = recs.first() else { continue };
            let (n_in, n_q) = (first.input.len(), first.queries.len());
            let (c_in, c_out) = (first.input.channels(), first.targets.cols());
            let mut arrays: [Vec<f64>; 4] = Default::default();
            for r in recs.iter() {
                if r.input.len() != n_in || r.queries.len() != n_q || r.input.channels() != c_in || r.targets.cols() != c_out {
                    return Err(DataError::InvalidSpec("samples in a split must share their sizes".into()));
                }
                arrays[0].extend_from_slice(r.input.coords());
                arrays[1].extend_from_slice(r.input.values());
                arrays[2].extend_from_slice(r.queries.coords());
                arrays[3].extend_from_slice(r.targets.values());
            }
            let n = recs.len();
            let [a0, a1, a2, a3] = arrays;
            s.put(&format!("{split}_input_coords"), vec![n, n_in, self.dim], a0)?;
            s.put(&format!("{split}_input_values"), vec![n, n_in, c_in], a1)?;
            s.put(&format!("{split}_query_coords"), vec![n, n_q, self.dim], a2)?;
            s.put(&format!("{split}_targets"), vec![n, n_q, c_out], a3)?;
        }
        Ok(s)
    }

    pub fn from_store(s: &TensorStore) -> Result<Self> {
        let dim = s.dim.ok_or_else(|| StoreError::Manifest("missing dim".into()))?;
        let mut splits = Vec::new();
        for split in ["train", "test"] {
            let count = s.counts.get(split).copied().unwrap_or(0);
            let mut recs = Vec::with_capacity(count);
            if count > 0 {
                let (shape_in, ic) = s.get(&format!("{split}_input_coords"))?;
                let (shape_iv, iv) = s.get(&format!("{split}_input_values"))?;
                let (shape_q, qc) = s.get(&format!("{split}_query_coords"))?;
                let (shape_t, tv) = s.get(&format!("{split}_targets"))?;
                let (n_in, c_in, n_q, c_out) = (shape_in[1], shape_iv[2], shape_q[1], shape_t[2]);
                if shape_in[0] != count || shape_q[0] != count || shape_t[0] != count {
                    return Err(StoreError::Manifest(format!("{split} counts disagree with array shapes")).into());
                }
                for i in 0..count {
                    let input = PointCloud::new(
                        dim,
                        ic[i * n_in * dim..(i + 1) * n_in * dim].to_vec(),
                        c_in,
                        iv[i * n_in * c_in..(i + 1) * n_in * c_in].to_vec(),
                    )?;
                    let queries = PointCloud::from_coords(dim, qc[i * n_q * dim..(i + 1) * n_q * dim].to_vec())?;
                    let targets = DenseMatrix::new(n_q, c_out, tv[i * n_q * c_out..(i + 1) * n_q * c_out].to_vec())
                        .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
                    recs.push(SampleRecord { input, queries, targets });
                }
            }
            splits.push(recs);
        }
        let test = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self {
            kind: s.kind.clone(),
            dim,
            seed: s.seed.unwrap_or(0),
            input_channels: s.channel_names.get("input").cloned().unwrap_or_default(),
            target_channels: s.channel_names.get("target").cloned().unwrap_or_default(),
            meta: s.meta.clone(),
            train,
            test,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<crate::store::Manifest> {
        Ok(self.to_store()?.save(dir)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_store(&TensorStore::load(dir)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CSinesSpec {
    pub num_train: usize,
    pub num_test: usize,
    /// Highest mode index per axis.
    pub max_mode: usize,
    /// Amplitudes are uniform in `[-amplitude, amplitude]` ...
    pub amplitude: f64,
    /// ... divided by `(k₁² + k₂²)^decay`.
    pub decay: f64,
    pub n_in: usize,
    pub n_q: usize,
    pub seed: u64,
}

impl Default for CSinesSpec {
    fn default() -> Self {
        Self { num_train: DEFAULT_TRAIN, num_test: DEFAULT_TEST, max_mode: 3, amplitude: 1.0, decay: 1.0, n_in: 128, n_q: 128, seed: 0 }
    }
}

/// One CSines field: amplitudes `a[(k1-1) * K + (k2-1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CSinesField {
    pub max_mode: usize,
    pub amps: Vec<f64>,
}

impl CSinesField {
    fn modes(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        let k = self.max_mode;
        (0..k * k).map(move |i| ((i / k + 1) as f64, (i % k + 1) as f64, self.amps[i]))
    }

    pub fn u(&self, x: f64, y: f64) -> f64 {
        self.modes().map(|(k1, k2, a)| a * (PI * k1 * (x + 1.0) / 2.0).sin() * (PI * k2 * (y + 1.0) / 2.0).sin()).sum()
    }

    /// `-Δu`, analytically.
    pub fn source(&self, x: f64, y: f64) -> f64 {
        self.modes()
            .map(|(k1, k2, a)| {
                a * PI * PI * (k1 * k1 + k2 * k2) / 4.0
                    * (PI * k1 * (x + 1.0) / 2.0).sin()
                    * (PI * k2 * (y + 1.0) / 2.0).sin()
            })
            .sum()
    }
}

fn draw_csines(spec: &CSinesSpec, rng: &mut Rng64) -> CSinesField {
    let k = spec.max_mode;
    let amps = (0..k * k)
        .map(|i| {
            let (k1, k2) = ((i / k + 1) as f64, (i % k + 1) as f64);
            rng.uniform(-spec.amplitude, spec.amplitude) / (k1 * k1 + k2 * k2).powf(spec.decay)
        })
        .collect();
    CSinesField { max_mode: k, amps }
}

fn supervised_record(
    rng: &mut Rng64,
    n_in: usize,
    n_q: usize,
    source: impl Fn(f64, f64) -> f64,
    target: impl Fn(f64, f64) -> f64,
) -> Result<SampleRecord> {
    let cin = subsample_cloud(CloudSource::Continuous { dim: 2 }, n_in, rng)?;
    let q = subsample_cloud(CloudSource::Continuous { dim: 2 }, n_q, rng)?;
    let vals = (0..n_in).map(|i| source(cin.coord(i)[0], cin.coord(i)[1])).collect();
    let input = PointCloud::new(2, cin.coords().to_vec(), 1, vals)?;
    let t = (0..n_q).map(|i| target(q.coord(i)[0], q.coord(i)[1])).collect();
    let targets = DenseMatrix::new(n_q, 1, t).expect("column of n_q values");
    Ok(SampleRecord { input, queries: q, targets })
}

pub fn gen_csines(spec: &CSinesSpec) -> Result<Dataset> {
    if spec.max_mode == 0 {
        return Err(DataError::InvalidSpec("max_mode must be at least 1".into()));
    }
    let make = |i: usize| -> Result<SampleRecord> {
        let mut rng = Rng64::child(spec.seed, i as u64);
        let field = draw_csines(spec, &mut rng);
        supervised_record(&mut rng, spec.n_in, spec.n_q, |x, y| field.source(x, y), |x, y| field.u(x, y))
    };
    let train = (0..spec.num_train).map(make).collect::<Result<_>>()?;
    let test = (spec.num_train..spec.num_train + spec.num_test).map(make).collect::<Result<_>>()?;
    Ok(Dataset {
        kind: "csines".into(),
        dim: 2,
        seed: spec.seed,
        input_channels: vec!["f".into()],
        target_channels: vec!["u".into()],
        meta: serde_json::to_value(spec).expect("serializable"),
        train,
        test,
    })
}

/// Node coordinate `i` of the `res`-point grid on `[-1, 1]`.
pub fn fd_node(i: usize, res: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (res - 1) as f64
}

/// `-Δ_h u` at interior nodes (zero on the boundary rows and columns).
pub fn fd_neg_laplacian(u: &DenseMatrix) -> DenseMatrix {
    let res = u.rows();
    let h = 2.0 / (res - 1) as f64;
    let inv_h2 = 1.0 / (h * h);
    DenseMatrix::from_fn(res, res, |i, j| {
        if i == 0 || j == 0 || i == res - 1 || j == res - 1 {
            0.0
        } else {
            (4.0 * u.get(i, j) - u.get(i - 1, j) - u.get(i + 1, j) - u.get(i, j - 1) - u.get(i, j + 1)) * inv_h2
        }
    })
}

fn interior_dot(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let res = a.rows();
    let mut s = 0.0;
    for i in 1..res - 1 {
        for j in 1..res - 1 {
            s += a.get(i, j) * b.get(i, j);
        }
    }
    s
}

/// Solves `-Δ_h u = f` with `u = 0` on the boundary by conjugate gradients.
///
/// `f` is given on all `res x res` nodes; boundary values are ignored.
pub fn solve_poisson_fd(f: &DenseMatrix) -> Result<DenseMatrix> {
    let res = f.rows();
    if res < 3 || !f.is_square() {
        return Err(DataError::InvalidSpec(format!("need a square grid with res >= 3, got {}x{}", f.rows(), f.cols())));
    }
    let mut rhs = DenseMatrix::zeros(res, res);
    for i in 1..res - 1 {
        for j in 1..res - 1 {
            rhs.set(i, j, f.get(i, j));
        }
    }
    let b_norm = interior_dot(&rhs, &rhs).sqrt();
    let mut u = DenseMatrix::zeros(res, res);
    if b_norm == 0.0 {
        return Ok(u);
    }
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = interior_dot(&r, &r);
    let cap = 10 * res * res;
    for _ in 0..cap {
        if rr.sqrt() <= CG_REL_TOL * b_norm {
            return Ok(u);
        }
        let ap = fd_neg_laplacian(&p);
        let step = rr / interior_dot(&p, &ap);
        for (x, d) in u.values_mut().iter_mut().zip(p.values()) {
            *x += step * d;
        }
        for (x, d) in r.values_mut().iter_mut().zip(ap.values()) {
            *x -= step * d;
        }
        let rr_new = interior_dot(&r, &r);
        let beta = rr_new / rr;
        for (x, d) in p.values_mut().iter_mut().zip(r.values()) {
            *x = d + beta * *x;
        }
        rr = rr_new;
    }
    Err(DataError::NoConvergence { iterations: cap, residual: rr.sqrt() / b_norm })
}

/// Bilinear interpolation of node values on the `res x res` grid over `[-1, 1]²`.
pub fn bilinear(u: &DenseMatrix, x: f64, y: f64) -> f64 {
    let res = u.rows();
    let h = 2.0 / (res - 1) as f64;
    let locate = |v: f64| {
        let s = ((v + 1.0) / h).clamp(0.0, (res - 1) as f64);
        let i = (s.floor() as usize).min(res - 2);
        (i, s - i as f64)
    };
    let (i, tx) = locate(x);
    let (j, ty) = locate(y);
    (1.0 - tx) * (1.0 - ty) * u.get(i, j) + tx * (1.0 - ty) * u.get(i + 1, j) + (1.0 - tx) * ty * u.get(i, j + 1)
        + tx * ty * u.get(i + 1, j + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonGaussSpec {
    pub num_train: usize,
    pub num_test: usize,
    pub min_sources: usize,
    pub max_sources: usize,
    pub amp_min: f64,
    pub amp_max: f64,
    pub width_min: f64,
    pub width_max: f64,
    /// Solver grid resolution `H` (nodes per axis, boundary included).
    pub solver_res: usize,
    pub n_in: usize,
    pub n_q: usize,
    pub seed: u64,
}

impl Default for PoissonGaussSpec {
    fn default() -> Self {
        Self {
            num_train: DEFAULT_TRAIN,
            num_test: DEFAULT_TEST,
            min_sources: 1,
            max_sources: 3,
            amp_min: 5.0,
            amp_max: 20.0,
            width_min: 0.1,
            width_max: 0.3,
            solver_res: 65,
            n_in: 128,
            n_q: 128,
            seed: 0,
        }
    }
}

impl PoissonGaussSpec {
    pub fn validate(&self) -> Result<()> {
        if self.solver_res < 17 {
            return Err(DataError::InvalidSpec(format!("solver_res must be at least 17, got {}", self.solver_res)));
        }
        if !(self.width_min > 0.0 && self.width_min <= self.width_max) {
            return Err(DataError::InvalidSpec("widths must be positive and ordered".into()));
        }
        if self.min_sources > self.max_sources {
            return Err(DataError::InvalidSpec("min_sources exceeds max_sources".into()));
        }
        Ok(())
    }
}

/// A sum of isotropic Gaussians `A exp(-|x - c|² / (2 w²))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussSources {
    pub sources: Vec<(f64, f64, f64, f64)>,
}

impl GaussSources {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.sources
            .iter()
            .map(|&(cx, cy, a, w)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp())
            .sum()
    }

    pub fn on_grid(&self, res: usize) -> DenseMatrix {
        DenseMatrix::from_fn(res, res, |i, j| self.eval(fd_node(i, res), fd_node(j, res)))
    }
}

pub fn draw_gauss_sources(spec: &PoissonGaussSpec, rng: &mut Rng64) -> GaussSources {
    let span = (spec.max_sources - spec.min_sources) as u64 + 1;
    let count = spec.min_sources + rng.below(span) as usize;
    let sources = (0..count)
        .map(|_| {
            let cx = rng.uniform(-0.7, 0.7);
            let cy = rng.uniform(-0.7, 0.7);
            let a = rng.uniform(spec.amp_min, spec.amp_max);
            let w = rng.uniform(spec.width_min, spec.width_max);
            (cx, cy, a, w)
        })
        .collect();
    GaussSources { sources }
}

pub fn gen_poisson_gauss(spec: &PoissonGaussSpec) -> Result<Dataset> {
    spec.validate()?;
    let make = |i: usize| -> Result<SampleRecord> {
        let mut rng = Rng64::child(spec.seed, i as u64);
        let src = draw_gauss_sources(spec, &mut rng);
        let u = solve_poisson_fd(&src.on_grid(spec.solver_res))?;
        supervised_record(&mut rng, spec.n_in, spec.n_q, |x, y| src.eval(x, y), |x, y| bilinear(&u, x, y))
    };
    let train = (0..spec.num_train).map(make).collect::<Result<_>>()?;
    let test = (spec.num_train..spec.num_train + spec.num_test).map(make).collect::<Result<_>>()?;
    Ok(Dataset {
        kind: "poisson-gauss".into(),
        dim: 2,
        seed: spec.seed,
        input_channels: vec!["f".into()],
        target_channels: vec!["u".into()],
        meta: serde_json::to_value(spec).expect("serializable"),
        train,
        test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTrajectorySpec {
    pub num_samples: usize,
    pub n_points: usize,
    pub num_stamps: usize,
    pub dt: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub seed: u64,
}

impl Default for ToyTrajectorySpec {
    fn default() -> Self {
        Self { num_samples: 32, n_points: 64, num_stamps: 5, dt: 0.1, v_min: -1.0, v_max: 1.0, seed: 0 }
    }
}

/// Periodic profile `u₀(x) = Σ_k b_k sin(πk x) + c_k cos(πk x)`, period 2.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicProfile {
    pub sin_coef: Vec<f64>,
    pub cos_coef: Vec<f64>,
}

impl PeriodicProfile {
    pub fn eval(&self, x: f64) -> f64 {
        let s: f64 = self.sin_coef.iter().enumerate().map(|(k, b)| b * (PI * (k + 1) as f64 * x).sin()).sum();
        let c: f64 = self.cos_coef.iter().enumerate().map(|(k, b)| b * (PI * (k + 1) as f64 * x).cos()).sum();
        s + c
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let s: f64 = self
            .sin_coef
            .iter()
            .enumerate()
            .map(|(k, b)| b * PI * (k + 1) as f64 * (PI * (k + 1) as f64 * x).cos())
            .sum();
        let c: f64 = self
            .cos_coef
            .iter()
            .enumerate()
            .map(|(k, b)| -b * PI * (k + 1) as f64 * (PI * (k + 1) as f64 * x).sin())
            .sum();
        s + c
    }

    /// `u₀(x - v t)` with the argument wrapped into `[-1, 1)`.
    pub fn advected(&self, x: f64, v: f64, t: f64) -> f64 {
        self.eval((x - v * t + 1.0).rem_euclid(2.0) - 1.0)
    }
}

/// One advection trajectory sampled on a fixed cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub coords: Vec<f64>,
    pub velocity: f64,
    pub profile: PeriodicProfile,
    pub times: Vec<f64>,
    /// `snapshots[s]` holds the field at `times[s]` on `coords`.
    pub snapshots: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn cloud(&self) -> PointCloud {
        PointCloud::from_coords(1, self.coords.clone()).expect("1-D coordinates")
    }

    pub fn snapshot(&self, s: usize) -> DenseMatrix {
        DenseMatrix::new(self.coords.len(), 1, self.snapshots[s].clone()).expect("one value per point")
    }

    /// One example per all2all pair. The input carries `[u(t_i), t_i, τ]`
    /// per point and the target is the mode's transformed field.
    pub fn temporal_examples(&self, mode: TemporalMode) -> Result<Vec<Example>> {
        let cloud = self.cloud();
        all2all_pairs(&self.times)?
            .into_iter()
            .map(|pair| {
                let now = self.snapshot(pair.i);
                let target = temporal_target(mode, &now, &self.snapshot(pair.j), pair.tau)?;
                let input = temporal_input(&cloud, &now, pair.t_i, pair.tau)?;
                Ok(Example { input, queries: cloud.clone(), target })
            })
            .collect()
    }
}

pub fn gen_toy_trajectory(spec: &ToyTrajectorySpec) -> Result<Vec<Trajectory>> {
    if spec.num_stamps < 2 || !(spec.dt > 0.0) || spec.n_points == 0 {
        return Err(DataError::InvalidSpec("need >= 2 stamps, dt > 0 and at least one point".into()));
    }
    let times: Vec<f64> = (0..spec.num_stamps).map(|s| s as f64 * spec.dt).collect();
    (0..spec.num_samples)
        .map(|i| {
            let mut rng = Rng64::child(spec.seed, i as u64);
            let velocity = rng.uniform(spec.v_min, spec.v_max);
            let profile = PeriodicProfile {
                sin_coef: (0..3).map(|k| rng.uniform(-1.0, 1.0) / (k + 1) as f64).collect(),
                cos_coef: (0..3).map(|k| rng.uniform(-1.0, 1.0) / (k + 1) as f64).collect(),
            };
            let coords: Vec<f64> = (0..spec.n_points).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let snapshots =
                times.iter().map(|&t| coords.iter().map(|&x| profile.advected(x, velocity, t)).collect()).collect();
            Ok(Trajectory { coords, velocity, profile, times: times.clone(), snapshots })
        })
        .collect()
}

/// Supervised 1-D advection data: all2all pairs of toy trajectories, split
/// by trajectory so no test field is seen during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvectionSpec {
    pub num_train: usize,
    pub num_test: usize,
    pub n_points: usize,
    pub num_stamps: usize,
    pub dt: f64,
    pub mode: TemporalMode,
    pub seed: u64,
}

impl Default for AdvectionSpec {
    fn default() -> Self {
        Self { num_train: 24, num_test: 8, n_points: 64, num_stamps: 4, dt: 0.1, mode: TemporalMode::Residual, seed: 0 }
    }
}

pub fn gen_advection(spec: &AdvectionSpec) -> Result<Dataset> {
    let traj = ToyTrajectorySpec {
        num_samples: spec.num_train + spec.num_test,
        n_points: spec.n_points,
        num_stamps: spec.num_stamps,
        dt: spec.dt,
        seed: spec.seed,
        ..ToyTrajectorySpec::default()
    };
    let records = |trs: &[Trajectory]| -> Result<Vec<SampleRecord>> {
        let mut out = Vec::new();
        for tr in trs {
            for ex in tr.temporal_examples(spec.mode)? {
                out.push(SampleRecord { input: ex.input, queries: ex.queries, targets: ex.target });
            }
        }
        Ok(out)
    };
    let all = gen_toy_trajectory(&traj)?;
    let (train, test) = all.split_at(spec.num_train);
    Ok(Dataset {
        kind: "advection".into(),
        dim: 1,
        seed: spec.seed,
        input_channels: vec!["u".into(), "t_i".into(), "tau".into()],
        target_channels: vec!["target".into()],
        meta: serde_json::to_value(spec).expect("serializable"),
        train: records(train)?,
        test: records(test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csines_single_mode_ratio() {
        let f = CSinesField { max_mode: 1, amps: vec![1.0] };
        for (x, y) in [(0.1, 0.3), (-0.5, 0.7), (0.9, -0.2)] {
            assert!((f.source(x, y) / f.u(x, y) - PI * PI * 2.0 / 4.0).abs() < 1e-12);
        }
        assert!(f.u(-1.0, 0.3).abs() < 1e-15 && f.u(0.2, 1.0).abs() < 1e-15);
    }

    #[test]
    fn poisson_zero_source() {
        let u = solve_poisson_fd(&DenseMatrix::zeros(17, 17)).unwrap();
        assert!(u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_reproduces_nodes_and_planes() {
        let res = 5;
        let u = DenseMatrix::from_fn(res, res, |i, j| 2.0 * fd_node(i, res) - fd_node(j, res) + 0.5);
        assert!((bilinear(&u, 0.5, -0.5) - 2.0).abs() < 1e-14);
        assert!((bilinear(&u, 0.3, 0.1) - (0.6 - 0.1 + 0.5)).abs() < 1e-14);
        assert!((bilinear(&u, 1.0, 1.0) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn grid_subsample_has_no_duplicates() {
        let mut rng = Rng64::new(1);
        let c = subsample_cloud(CloudSource::Grid { res: 5 }, 25, &mut rng).unwrap();
        let mut pts: Vec<(i64, i64)> =
            (0..25).map(|i| ((c.coord(i)[0] * 1e6).round() as i64, (c.coord(i)[1] * 1e6).round() as i64)).collect();
        pts.sort();
        pts.dedup();
        assert_eq!(pts.len(), 25);
        assert!(matches!(
            subsample_cloud(CloudSource::Grid { res: 5 }, 26, &mut rng),
            Err(DataError::TooManyRequested { .. })
        ));
    }

    #[test]
    fn advection_basics() {
        let p = PeriodicProfile { sin_coef: vec![0.5, 0.2], cos_coef: vec![0.1, -0.3] };
        assert!((p.advected(0.3, 0.0, 1.7) - p.eval(0.3)).abs() < 1e-15);
        assert!((p.advected(0.3, 0.8, 2.5) - p.eval(0.3)).abs() < 1e-12);
    }
}
