//! Loss, normalization, temporal targets, optimizer, gradients, metrics and
//! the training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{KernelError, PointCloud, PointSet};
use crate::linalg::DenseMatrix;
use crate::model::{IknoModel, ModelError, ParamVector, Prepared};
use crate::rng::Rng64;
use crate::store::{StoreError, TensorStore};

pub const NORM_EPS: f64 = 1e-10;
/// Targets with `‖y‖` below this are reported instead of divided by.
pub const ZERO_TARGET_TOL: f64 = 1e-30;
/// Upper bound enforced on every branch α after an optimizer step.
pub const ALPHA_MAX: f64 = -1e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("target norm is zero")]
    ZeroTarget,
    #[error("lead time must be positive, got {0}")]
    NonpositiveTau(f64),
    #[error("time stamps must be strictly increasing")]
    NonMonotoneTimes,
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("gradient is not finite")]
    NonFiniteGradient,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn same_shape(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(TrainError::ShapeMismatch(format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols())));
    }
    Ok(())
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub epsilon: f64,
}

/// Fits per-channel mean and (population) standard deviation over every row
/// of every field.
pub fn zscore_fit<'a>(fields: impl IntoIterator<Item = &'a DenseMatrix>) -> Result<NormStats> {
    let fields: Vec<&DenseMatrix> = fields.into_iter().collect();
    let c = fields.first().ok_or(TrainError::EmptyDataset)?.cols();
    let n: usize = fields.iter().map(|f| f.rows()).sum();
    if n == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let mut mu = vec![0.0; c];
    for f in &fields {
        if f.cols() != c {
            return Err(TrainError::ShapeMismatch(format!("{} vs {} channels", f.cols(), c)));
        }
        for r in 0..f.rows() {
            mu.iter_mut().zip(f.row(r)).for_each(|(m, v)| *m += v);
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for f in &fields {
        for r in 0..f.rows() {
            for ((s, v), m) in var.iter_mut().zip(f.row(r)).zip(&mu) {
                *s += (v - m) * (v - m);
            }
        }
    }
    let sigma = var.into_iter().map(|s| (s / n as f64).sqrt()).collect();
    Ok(NormStats { mu, sigma, epsilon: NORM_EPS })
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn apply(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.mu[c]) / (self.sigma[c] + self.epsilon))
    }

    pub fn invert(&self, x: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * (self.sigma[c] + self.epsilon) + self.mu[c])
    }

    pub fn apply_values(&self, values: &[f64]) -> Vec<f64> {
        let c = self.channels();
        values.iter().enumerate().map(|(i, v)| (v - self.mu[i % c]) / (self.sigma[i % c] + self.epsilon)).collect()
    }
}

/// `‖y - ŷ‖ / ‖y‖` over all points and channels.
pub fn relative_l2_loss(y: &DenseMatrix, y_hat: &DenseMatrix) -> Result<f64> {
    Ok(relative_l2_loss_grad(y, y_hat)?.0)
}

/// Loss and its gradient with respect to `ŷ`.
pub fn relative_l2_loss_grad(y: &DenseMatrix, y_hat: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    same_shape(y, y_hat)?;
    let ny = y.frobenius();
    if !(ny >= ZERO_TARGET_TOL) {
        return Err(TrainError::ZeroTarget);
    }
    let diff = y_hat.sub(y).map_err(|e| TrainError::ShapeMismatch(e.to_string()))?;
    let nd = diff.frobenius();
    let loss = nd / ny;
    let grad = if nd == 0.0 { DenseMatrix::zeros(y.rows(), y.cols()) } else { diff.scaled(1.0 / (ny * nd)) };
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    Direct,
    Residual,
    Derivative,
}

impl TemporalMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "direct" => Some(Self::Direct),
            "residual" => Some(Self::Residual),
            "derivative" => Some(Self::Derivative),
            _ => None,
        }
    }
}

/// Field at two times with the lead time between them.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSample {
    pub t_i: f64,
    pub tau: f64,
    pub state_now: DenseMatrix,
    pub state_future: DenseMatrix,
}

pub fn temporal_target(mode: TemporalMode, u_now: &DenseMatrix, u_future: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    same_shape(u_now, u_future)?;
    Ok(match mode {
        TemporalMode::Direct => u_future.clone(),
        TemporalMode::Residual => DenseMatrix::from_fn(u_now.rows(), u_now.cols(), |r, c| u_future.get(r, c) - u_now.get(r, c)),
        TemporalMode::Derivative => {
            if !(tau > 0.0) {
                return Err(TrainError::NonpositiveTau(tau));
            }
            DenseMatrix::from_fn(u_now.rows(), u_now.cols(), |r, c| (u_future.get(r, c) - u_now.get(r, c)) / tau)
        }
    })
}

pub fn temporal_reconstruct(mode: TemporalMode, u_now: &DenseMatrix, pred: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    same_shape(u_now, pred)?;
    if mode != TemporalMode::Direct && !(tau > 0.0) {
        return Err(TrainError::NonpositiveTau(tau));
    }
    Ok(match mode {
        TemporalMode::Direct => pred.clone(),
        TemporalMode::Residual => DenseMatrix::from_fn(u_now.rows(), u_now.cols(), |r, c| u_now.get(r, c) + pred.get(r, c)),
        TemporalMode::Derivative => DenseMatrix::from_fn(u_now.rows(), u_now.cols(), |r, c| u_now.get(r, c) + tau * pred.get(r, c)),
    })
}

/// Appends `t_i` and `τ` as two condition channels after the state.
pub fn temporal_input(cloud: &PointCloud, state: &DenseMatrix, t_i: f64, tau: f64) -> Result<PointCloud> {
    if state.rows() != cloud.len() {
        return Err(TrainError::ShapeMismatch(format!("{} state rows for {} points", state.rows(), cloud.len())));
    }
    let mut vals = Vec::with_capacity(cloud.len() * (state.cols() + 2));
    for r in 0..cloud.len() {
        vals.extend_from_slice(state.row(r));
        vals.push(t_i);
        vals.push(tau);
    }
    PointCloud::new(cloud.dim(), cloud.coords().to_vec(), state.cols() + 2, vals)
        .map_err(|e| TrainError::ShapeMismatch(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimePair {
    pub i: usize,
    pub j: usize,
    pub t_i: f64,
    pub tau: f64,
}

/// Every `(i, j)` with `j > i`.
pub fn all2all_pairs(times: &[f64]) -> Result<Vec<TimePair>> {
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(TrainError::NonMonotoneTimes);
    }
    let mut out = Vec::new();
    for i in 0..times.len() {
        for j in i + 1..times.len() {
            out.push(TimePair { i, j, t_i: times[i], tau: times[j] - times[i] });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0`.
    pub lr_min_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clipping threshold.
    pub clip: f64,
    /// Steps over which the cosine schedule anneals.
    pub horizon: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr0: 1e-3, lr_min_factor: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4, clip: 1.0, horizon: 2000 }
    }
}

impl AdamWConfig {
    /// Learning rate used by step `t` (1-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        let lr_min = self.lr0 * self.lr_min_factor;
        if self.horizon == 0 {
            return self.lr0;
        }
        let frac = ((t.saturating_sub(1)).min(self.horizon)) as f64 / self.horizon as f64;
        lr_min + (self.lr0 - lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: AdamWConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl OptimizerState {
    pub fn new(n: usize, config: AdamWConfig) -> Self {
        Self { step: 0, m: vec![0.0; n], v: vec![0.0; n], config }
    }
}

/// One AdamW update with global-norm clipping and decoupled weight decay.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<StepInfo> {
    if grad.len() != params.len() || state.m.len() != params.len() {
        return Err(TrainError::ShapeMismatch(format!("{} gradients for {} parameters", grad.len(), params.len())));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    let c = state.config;
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let clip_scale = if norm > c.clip { c.clip / norm } else { 1.0 };
    state.step += 1;
    let t = state.step;
    let lr = c.lr_at(t);
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    for k in 0..params.len() {
        let g = grad[k] * clip_scale;
        state.m[k] = c.beta1 * state.m[k] + (1.0 - c.beta1) * g;
        state.v[k] = c.beta2 * state.v[k] + (1.0 - c.beta2) * g * g;
        params[k] *= 1.0 - lr * c.weight_decay;
        params[k] -= lr * (state.m[k] / bc1) / ((state.v[k] / bc2).sqrt() + c.eps);
    }
    Ok(StepInfo { lr, grad_norm: norm, clip_scale })
}

/// Central differences with step `probe_eps * (1 + |θ_k|)`.
pub fn grad_fd(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], probe_eps: f64) -> Result<Vec<f64>> {
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let eps = probe_eps * (1.0 + params[k].abs());
        theta[k] = params[k] + eps;
        let up = loss(&theta);
        theta[k] = params[k] - eps;
        let down = loss(&theta);
        theta[k] = params[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(TrainError::NonFiniteLoss);
        }
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// One supervised pair: conditions on `input`, targets at `queries`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: PointCloud,
    pub queries: PointCloud,
    pub target: DenseMatrix,
}

/// Sum of per-sample relative L2 losses.
pub fn batch_loss_sum(model: &IknoModel, params: &ParamVector, batch: &[Example]) -> Result<f64> {
    let prep = model.prepare(params)?;
    let mut total = 0.0;
    for ex in batch {
        let (pred, _) = model.forward_traced(params, &prep, &ex.input, &ex.queries)?;
        total += relative_l2_loss(&ex.target, &pred)?;
    }
    Ok(total)
}

fn sample_grad(model: &IknoModel, params: &ParamVector, prep: &Prepared, ex: &Example) -> Result<(f64, Vec<f64>)> {
    let (pred, trace) = model.forward_traced(params, prep, &ex.input, &ex.queries)?;
    let (loss, pred_bar) = relative_l2_loss_grad(&ex.target, &pred)?;
    Ok((loss, model.backward(params, prep, &trace, &pred_bar)?))
}

/// Reverse-sweep gradient of the summed batch loss. Each sample's gradient
/// is formed separately and the per-sample vectors are added in batch order.
pub fn grad_analytic(model: &IknoModel, params: &ParamVector, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let prep = model.prepare(params)?;
    let mut total = 0.0;
    let mut grad = vec![0.0; params.len()];
    for ex in batch {
        let (l, g) = sample_grad(model, params, &prep, ex)?;
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grad))
}

/// Sorted-order median; even counts average the two middle values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Mean over components of the per-component median relative L1, in percent.
    pub median_rel_l1: f64,
    pub per_component: Vec<f64>,
    pub mse: f64,
    pub mae: f64,
    /// Sample-components skipped because `‖u‖₁` was zero.
    pub excluded: usize,
    pub samples: usize,
}

/// Relative L1 errors `e[s][c] = ‖u - û‖₁ / ‖u‖₁`, `None` for zero targets.
pub fn rel_l1_errors(preds: &[DenseMatrix], truths: &[DenseMatrix]) -> Result<Vec<Vec<Option<f64>>>> {
    if preds.len() != truths.len() {
        return Err(TrainError::ShapeMismatch(format!("{} predictions for {} targets", preds.len(), truths.len())));
    }
    preds
        .iter()
        .zip(truths)
        .map(|(p, u)| {
            same_shape(p, u)?;
            Ok((0..u.cols())
                .map(|c| {
                    let (mut num, mut den) = (0.0, 0.0);
                    for r in 0..u.rows() {
                        num += (u.get(r, c) - p.get(r, c)).abs();
                        den += u.get(r, c).abs();
                    }
                    (den > 0.0).then(|| num / den)
                })
                .collect())
        })
        .collect()
}

/// Median relative L1 from precomputed per-sample, per-component errors (fractions).
pub fn median_rel_l1_from_errors(errors: &[Vec<Option<f64>>]) -> Result<(f64, Vec<f64>, usize)> {
    let c = errors.first().ok_or(TrainError::EmptyDataset)?.len();
    let mut excluded = 0;
    let mut per_component = Vec::with_capacity(c);
    for k in 0..c {
        let vals: Vec<f64> = errors.iter().filter_map(|e| e[k]).collect();
        excluded += errors.len() - vals.len();
        per_component.push(100.0 * median(&vals).ok_or(TrainError::ZeroTarget)?);
    }
    if excluded > 0 {
        log::warn!("{excluded} sample-components with zero target excluded from the median");
    }
    let mean = per_component.iter().sum::<f64>() / c as f64;
    Ok((mean, per_component, excluded))
}

pub fn median_rel_l1(preds: &[DenseMatrix], truths: &[DenseMatrix]) -> Result<MetricReport> {
    let errors = rel_l1_errors(preds, truths)?;
    let (m, per_component, excluded) = median_rel_l1_from_errors(&errors)?;
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for (p, u) in preds.iter().zip(truths) {
        for (a, b) in p.values().iter().zip(u.values()) {
            se += (a - b) * (a - b);
            ae += (a - b).abs();
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok(MetricReport { median_rel_l1: m, per_component, mse: se / n, mae: ae / n, excluded, samples: preds.len() })
}

/// Input and target normalization for a supervised dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub input: NormStats,
    pub target: NormStats,
}

impl Normalizer {
    pub fn fit(examples: &[Example]) -> Result<Self> {
        let inputs: Vec<DenseMatrix> = examples
            .iter()
            .map(|e| DenseMatrix::new(e.input.len(), e.input.channels(), e.input.values().to_vec()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| TrainError::ShapeMismatch(e.to_string()))?;
        Ok(Self { input: zscore_fit(&inputs)?, target: zscore_fit(examples.iter().map(|e| &e.target))? })
    }

    pub fn apply(&self, ex: &Example) -> Result<Example> {
        let input = PointCloud::new(
            ex.input.dim(),
            ex.input.coords().to_vec(),
            ex.input.channels(),
            self.input.apply_values(ex.input.values()),
        )
        .map_err(|e| TrainError::ShapeMismatch(e.to_string()))?;
        Ok(Example { input, queries: ex.queries.clone(), target: self.target.apply(&ex.target) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 4, seed: 0, optimizer: AdamWConfig::default(), log_every: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub wall_time_s: f64,
}

/// Forces every branch α to stay at or below [`ALPHA_MAX`].
pub fn clamp_alpha(model: &IknoModel, params: &mut ParamVector) {
    if params.segment("kernel").is_empty() {
        return;
    }
    for q in 0..model.config().branches {
        let k = model.alpha_index(q);
        params.values[k] = params.values[k].min(ALPHA_MAX);
    }
}

/// Mini-batch AdamW on the mean relative L2 loss. Batches come from a
/// seeded per-epoch shuffle; a JSON line per logged step goes to `log`.
pub fn train(
    model: &IknoModel,
    params: &mut ParamVector,
    state: &mut OptimizerState,
    data: &[Example],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let start = Instant::now();
    let bs = cfg.batch_size.clamp(1, data.len());
    // Batch order depends only on how many samples were consumed, so a run
    // resumed from a checkpoint sees the same batches as an unbroken one.
    let consumed = state.step as usize * bs;
    let mut epoch = (consumed / data.len()) as u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng64::child(cfg.seed, epoch).shuffle(&mut order);
    epoch += 1;
    let mut cursor = consumed % data.len();
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(bs);
        while batch.len() < bs {
            if cursor >= order.len() {
                order = (0..data.len()).collect();
                Rng64::child(cfg.seed, epoch).shuffle(&mut order);
                epoch += 1;
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let (sum, mut grad) = match grad_analytic(model, params, &batch) {
            // Kernel parameters that overflowed their positive range have no finite loss.
            Err(TrainError::Model(ModelError::Kernel(KernelError::InvalidParams(_)))) if state.step > 0 => {
                return Err(TrainError::NonFiniteLoss)
            }
            r => r?,
        };
        let loss = sum / bs as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss);
        }
        grad.iter_mut().for_each(|g| *g /= bs as f64);
        let info = optimizer_step(state, &mut params.values, &grad)?;
        clamp_alpha(model, params);
        if first_loss.is_nan() {
            first_loss = loss;
        }
        last_loss = loss;
        let step = state.step;
        if let Some(w) = log.as_deref_mut() {
            if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1) {
                let rec = StepRecord { step, lr: info.lr, loss, grad_norm: info.grad_norm, wall_time_s: start.elapsed().as_secs_f64() };
                writeln!(w, "{}", serde_json::to_string(&rec).expect("serializable"))?;
            }
        }
    }
    Ok(TrainSummary { steps: cfg.steps, first_loss, final_loss: last_loss, wall_time_s: start.elapsed().as_secs_f64() })
}

/// Predictions for every example, de-normalized when a normalizer is given.
/// Examples are taken raw; normalization of inputs happens here.
pub fn predict_all(model: &IknoModel, params: &ParamVector, data: &[Example], norm: Option<&Normalizer>) -> Result<Vec<DenseMatrix>> {
    let prep = model.prepare(params)?;
    data.iter()
        .map(|ex| {
            let ex = match norm {
                Some(n) => n.apply(ex)?,
                None => ex.clone(),
            };
            let (pred, _) = model.forward_traced(params, &prep, &ex.input, &ex.queries)?;
            Ok(match norm {
                Some(n) => n.target.invert(&pred),
                None => pred,
            })
        })
        .collect()
}

pub fn evaluate(model: &IknoModel, params: &ParamVector, data: &[Example], norm: Option<&Normalizer>) -> Result<MetricReport> {
    let preds = predict_all(model, params, data, norm)?;
    let truths: Vec<DenseMatrix> = data.iter().map(|e| e.target.clone()).collect();
    median_rel_l1(&preds, &truths)
}

pub fn save_checkpoint(dir: &Path, params: &ParamVector, state: &OptimizerState, meta: serde_json::Value) -> Result<()> {
    let mut s = params.to_store()?;
    s.kind = "checkpoint".into();
    s.meta["optimizer_step"] = serde_json::json!(state.step);
    s.meta["optimizer"] = serde_json::to_value(state.config).expect("serializable");
    s.meta["extra"] = meta;
    s.put("adam_m", vec![state.m.len()], state.m.clone())?;
    s.put("adam_v", vec![state.v.len()], state.v.clone())?;
    s.save(dir)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamVector, OptimizerState, serde_json::Value)> {
    let mut s = TensorStore::load(dir)?;
    s.expect_kind("checkpoint")?;
    let n = s.get("adam_m")?.1.len();
    let m = s.get_shaped("adam_m", &[n])?.to_vec();
    let v = s.get_shaped("adam_v", &[n])?.to_vec();
    let step = s.meta["optimizer_step"].as_u64().ok_or_else(|| StoreError::Manifest("missing optimizer_step".into()))?;
    let config: AdamWConfig =
        serde_json::from_value(s.meta["optimizer"].clone()).map_err(|e| StoreError::Manifest(e.to_string()))?;
    let extra = s.meta["extra"].clone();
    s.kind = "params".into();
    let params = ParamVector::from_store(&s)?;
    Ok((params, OptimizerState { step, m, v, config }, extra))
}

/// Advances a field by a lead time.
pub trait Stepper {
    fn step(&self, state: &DenseMatrix, t: f64, tau: f64) -> Result<DenseMatrix>;
}

impl<F: Fn(&DenseMatrix, f64, f64) -> Result<DenseMatrix>> Stepper for F {
    fn step(&self, state: &DenseMatrix, t: f64, tau: f64) -> Result<DenseMatrix> {
        self(state, t, tau)
    }
}

/// A trained temporal model used as a [`Stepper`] on a fixed cloud.
pub struct ModelStepper<'a> {
    pub model: &'a IknoModel,
    pub params: &'a ParamVector,
    pub norm: Option<&'a Normalizer>,
    pub cloud: &'a PointCloud,
    pub mode: TemporalMode,
}

impl Stepper for ModelStepper<'_> {
    fn step(&self, state: &DenseMatrix, t: f64, tau: f64) -> Result<DenseMatrix> {
        let input = temporal_input(self.cloud, state, t, tau)?;
        let ex = Example { input, queries: self.cloud.clone(), target: state.clone() };
        let pred = predict_all(self.model, self.params, std::slice::from_ref(&ex), self.norm)?.remove(0);
        temporal_reconstruct(self.mode, state, &pred, tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Direct,
    Autoregressive,
}

/// States at the stamps a rollout touches, starting with `(times[0], initial)`.
///
/// Direct makes one call with `τ = T - t_0`. Autoregressive chains calls
/// with the smallest gap between consecutive stamps.
pub fn rollout(mode: RolloutMode, stepper: &dyn Stepper, initial: &DenseMatrix, times: &[f64]) -> Result<Vec<(f64, DenseMatrix)>> {
    if times.len() < 2 {
        return Ok(vec![(times.first().copied().unwrap_or(0.0), initial.clone())]);
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(TrainError::NonMonotoneTimes);
    }
    let t0 = times[0];
    let t_end = times[times.len() - 1];
    let mut out = vec![(t0, initial.clone())];
    match mode {
        RolloutMode::Direct => out.push((t_end, stepper.step(initial, t0, t_end - t0)?)),
        RolloutMode::Autoregressive => {
            let dt = times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            let n = ((t_end - t0) / dt).round().max(1.0) as usize;
            let mut state = initial.clone();
            for k in 0..n {
                let t = t0 + k as f64 * dt;
                state = stepper.step(&state, t, dt)?;
                out.push((t0 + (k + 1) as f64 * dt, state.clone()));
            }
        }
    }
    Ok(out)
}
