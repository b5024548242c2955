//! `train` and `eval`: supervised training with resumable checkpoints and
//! held-out metrics.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ikno_core::data::Dataset;
use ikno_core::model::{IknoModel, KernelFamily, ModelConfig, ParamVector, ProcessorKind};
use ikno_core::store::MANIFEST_FILE;
use ikno_core::train::{
    evaluate, load_checkpoint, save_checkpoint, train, AdamWConfig, Example, MetricReport, Normalizer, OptimizerState,
    TrainConfig, TrainError,
};
use ikno_core::Variant;

use crate::{CliError, Result, RunConfig};

pub const TRAIN_KEYS: &[&str] = &[
    "data",
    "variant",
    "steps",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "clip",
    "log_every",
    "checkpoint_every",
    "resume",
    "hidden",
    "grid_l",
    "branches",
    "processor",
    "mlp_depth",
    "heads",
    "head_depth",
    "init_alpha",
];

pub const EVAL_KEYS: &[&str] = &["data", "checkpoint", "split", "init"];

pub const DEFAULT_LR: f64 = 1e-3;

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(CliError::MissingDataset(dir.to_path_buf()));
    }
    Ok(Dataset::load(dir)?)
}

pub fn parse_processor(cfg: &RunConfig, hidden: usize) -> Result<ProcessorKind> {
    Ok(match cfg.raw("processor").unwrap_or("mlp") {
        "identity" => ProcessorKind::Identity,
        "mlp" => ProcessorKind::Mlp { depth: cfg.get("mlp_depth", 2)?, width: hidden },
        "attention" => ProcessorKind::TinyAttention { heads: cfg.get("heads", 2)? },
        other => return Err(CliError::Config(format!("processor: unknown `{other}`"))),
    })
}

pub fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).ok_or_else(|| CliError::Config(format!("variant: unknown `{s}`")))
}

/// Model configuration for a dataset, with shape overrides from `cfg`.
pub fn model_config(cfg: &RunConfig, ds: &Dataset, variant: Variant, kernel: KernelFamily) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    let hidden = cfg.get("hidden", d.hidden)?;
    // A fixed window kernel has one scale, so one branch.
    let branches = match kernel {
        KernelFamily::LinearWindow { .. } => 1,
        _ => cfg.get("branches", d.branches)?,
    };
    let init_scales = (0..branches).map(|q| 2f64.powi(q as i32)).collect();
    let mc = ModelConfig {
        dim: ds.dim,
        grid_l: cfg.get("grid_l", d.grid_l)?,
        hidden,
        branches,
        processor: parse_processor(cfg, hidden)?,
        variant,
        head_depth: cfg.get("head_depth", d.head_depth)?,
        in_channels: ds.input_channels.len(),
        out_channels: ds.target_channels.len(),
        kernel,
        init_scales,
        init_alpha: cfg.get("init_alpha", d.init_alpha)?,
        ..d
    };
    mc.validate()?;
    Ok(mc)
}

/// Everything needed to rebuild a trained model next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub data: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub normalizer: Normalizer,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub variant: String,
    pub data: String,
    pub seed: u64,
    pub params: usize,
    pub steps: u64,
    pub resumed_from_step: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub init_metrics: MetricReport,
    pub final_metrics: MetricReport,
    /// `1 - final / init` of the test median relative L1.
    pub reduction: f64,
    pub wall_time_s: f64,
}

pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Trains one model and evaluates it before and after on the test split.
/// `run_dir` receives `run.json`, the checkpoint, the log and `metrics.json`.
pub fn train_model(
    ds: &Dataset,
    data_path: &Path,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    run_dir: &Path,
    resume: Option<&Path>,
    checkpoint_every: u64,
) -> Result<TrainReport> {
    let model = IknoModel::new(model_cfg.clone())?;
    let train_raw = ds.train_examples();
    let test = ds.test_examples();
    let normalizer = Normalizer::fit(&train_raw)?;
    let train_data: Vec<Example> = train_raw.iter().map(|e| normalizer.apply(e)).collect::<std::result::Result<_, _>>()?;

    let init_params = model.init_params(train_cfg.seed);
    let init_metrics = evaluate(&model, &init_params, &test, Some(&normalizer))?;
    let (mut params, mut state) = match resume {
        Some(dir) => {
            let (p, s, _) = load_checkpoint(dir).map_err(|e| match e {
                TrainError::Store(_) if !dir.join(MANIFEST_FILE).is_file() => CliError::MissingCheckpoint(dir.to_path_buf()),
                e => e.into(),
            })?;
            if p.len() != model.num_params() {
                return Err(CliError::Config(format!(
                    "checkpoint has {} parameters, model needs {}",
                    p.len(),
                    model.num_params()
                )));
            }
            (p, s)
        }
        None => (init_params, OptimizerState::new(model.num_params(), train_cfg.optimizer)),
    };
    let resumed_from_step = state.step;

    std::fs::create_dir_all(run_dir)?;
    let info = RunInfo {
        data: data_path.to_path_buf(),
        seed: train_cfg.seed,
        model: model_cfg.clone(),
        train: train_cfg,
        normalizer: normalizer.clone(),
    };
    crate::write_json(&run_dir.join(RUN_FILE), &info)?;
    let ckpt = run_dir.join(CHECKPOINT_DIR);
    let mut log = OpenOptions::new().create(true).append(true).open(run_dir.join("train_log.jsonl"))?;

    let meta = serde_json::json!({ "variant": model_cfg.variant.label() });
    save_checkpoint(&ckpt, &params, &state, meta.clone())?;

    let start = std::time::Instant::now();
    let (mut first_loss, mut final_loss) = (f64::NAN, f64::NAN);
    let chunk = checkpoint_every.max(1);
    while state.step < train_cfg.steps {
        let n = chunk.min(train_cfg.steps - state.step);
        let cfg = TrainConfig { steps: n, ..train_cfg };
        match train(&model, &mut params, &mut state, &train_data, &cfg, Some(&mut log as &mut dyn Write)) {
            Ok(s) => {
                if first_loss.is_nan() {
                    first_loss = s.first_loss;
                }
                final_loss = s.final_loss;
            }
            Err(TrainError::NonFiniteLoss) | Err(TrainError::NonFiniteGradient) => {
                return Err(CliError::Diverged { step: state.step + 1, checkpoint: ckpt });
            }
            Err(e) => return Err(e.into()),
        }
        save_checkpoint(&ckpt, &params, &state, meta.clone())?;
    }

    let final_metrics = evaluate(&model, &params, &test, Some(&normalizer))?;
    let report = TrainReport {
        variant: model_cfg.variant.label(),
        data: data_path.display().to_string(),
        seed: train_cfg.seed,
        params: model.num_params(),
        steps: state.step,
        resumed_from_step,
        first_loss,
        final_loss,
        reduction: 1.0 - final_metrics.median_rel_l1 / init_metrics.median_rel_l1,
        init_metrics,
        final_metrics,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    crate::write_json(&run_dir.join("metrics.json"), &report)?;
    Ok(report)
}

pub fn train_config(cfg: &RunConfig, num_train: usize) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let batch_size: usize = cfg.get("batch_size", d.batch_size)?;
    if batch_size == 0 {
        return Err(CliError::Config("batch_size must be positive".into()));
    }
    let steps = match cfg.get_opt::<u64>("epochs")? {
        Some(e) => e * num_train.div_ceil(batch_size) as u64,
        None => cfg.get("steps", d.steps)?,
    };
    let optimizer = AdamWConfig {
        lr0: cfg.get("lr", DEFAULT_LR)?,
        weight_decay: cfg.get("weight_decay", d.optimizer.weight_decay)?,
        clip: cfg.get("clip", d.optimizer.clip)?,
        horizon: steps,
        ..d.optimizer
    };
    Ok(TrainConfig { steps, batch_size, seed: cfg.seed, optimizer, log_every: cfg.get("log_every", d.log_every)? })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let data = cfg.require_path("data")?;
    let ds = load_dataset(&data)?;
    let variant = parse_variant(cfg.raw("variant").unwrap_or("tp"))?;
    let mc = model_config(cfg, &ds, variant, KernelFamily::Learnable)?;
    let tc = train_config(cfg, ds.train.len())?;
    let resume = cfg.raw("resume").map(PathBuf::from);
    let every = cfg.get("checkpoint_every", 100u64)?;
    train_model(&ds, &data, mc, tc, &cfg.out, resume.as_deref(), every)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub data: String,
    pub split: String,
    pub variant: String,
    /// True when the initialization was evaluated instead of the checkpoint.
    pub init: bool,
    pub step: u64,
    pub metrics: MetricReport,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let run_dir = cfg.require_path("checkpoint")?;
    let run_file = run_dir.join(RUN_FILE);
    if !run_file.is_file() {
        return Err(CliError::MissingCheckpoint(run_dir));
    }
    let info: RunInfo = serde_json::from_str(&std::fs::read_to_string(&run_file)?)?;
    let data = cfg.raw("data").map(PathBuf::from).unwrap_or_else(|| info.data.clone());
    let ds = load_dataset(&data)?;
    let model = IknoModel::new(info.model.clone())?;
    let init: bool = cfg.get("init", false)?;
    let (params, step): (ParamVector, u64) = if init {
        (model.init_params(info.seed), 0)
    } else {
        let dir = run_dir.join(CHECKPOINT_DIR);
        if !dir.join(MANIFEST_FILE).is_file() {
            return Err(CliError::MissingCheckpoint(dir));
        }
        let (p, s, _) = load_checkpoint(&dir)?;
        (p, s.step)
    };
    let split = cfg.raw("split").unwrap_or("test").to_string();
    let examples = match split.as_str() {
        "test" => ds.test_examples(),
        "train" => ds.train_examples(),
        other => return Err(CliError::Config(format!("split: unknown `{other}`"))),
    };
    let metrics = evaluate(&model, &params, &examples, Some(&info.normalizer))?;
    let report = EvalReport {
        checkpoint: run_dir.display().to_string(),
        data: data.display().to_string(),
        split,
        variant: info.model.variant.label(),
        init,
        step,
        metrics,
    };
    let name = if init { "eval_init.json" } else { "eval.json" };
    crate::write_json(&cfg.out.join(name), &report)?;
    Ok(report)
}
