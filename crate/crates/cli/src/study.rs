//! `finite-order-study`: the same model trained with a fixed linear-window
//! kernel while only the propagator changes: truncations `p = 0..=P`, then
//! the two closed-form resolvents.

use serde::Serialize;

use ikno_core::model::KernelFamily;
use ikno_core::Variant;

use crate::run::{load_dataset, model_config, train_config, train_model};
use crate::{CliError, Result, RunConfig};

pub const KEYS: &[&str] = &[
    "data",
    "steps",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "clip",
    "log_every",
    "hidden",
    "grid_l",
    "mlp_depth",
    "head_depth",
    "radius",
    "scale",
    "alpha",
    "max_order",
];

pub const DEFAULT_STEPS: u64 = 300;

/// Published trend for `p = 1..4`, carried as context only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceTrend {
    pub orders: Vec<usize>,
    pub median_rel_l1_percent: Vec<f64>,
    pub reproduced: bool,
    pub note: String,
}

impl Default for ReferenceTrend {
    fn default() -> Self {
        Self {
            orders: vec![1, 2, 3, 4],
            median_rel_l1_percent: vec![2.49, 2.32, 2.25, 2.13],
            reproduced: false,
            note: "published reference trend; not reproduced here (different processor and scale)".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub config: String,
    pub order: Option<usize>,
    pub median_rel_l1: f64,
    pub mse: f64,
    pub mae: f64,
    pub init_median_rel_l1: f64,
    pub final_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub reference: ReferenceTrend,
    pub data: String,
    pub seed: u64,
    pub steps: u64,
    pub kernel: KernelFamily,
    pub processor: String,
    pub rows: Vec<StudyRow>,
    pub all_finite: bool,
}

pub fn cmd_finite_order_study(cfg: &RunConfig) -> Result<StudyReport> {
    let data = cfg.require_path("data")?;
    let ds = load_dataset(&data)?;
    let kernel = KernelFamily::LinearWindow {
        radius: cfg.get("radius", 0.2)?,
        scale: cfg.get("scale", 1.0)?,
        alpha: cfg.get("alpha", -0.15)?,
    };
    let max_order: usize = cfg.get("max_order", 4)?;
    let mut tc = train_config(cfg, ds.train.len())?;
    if cfg.raw("steps").is_none() && cfg.raw("epochs").is_none() {
        tc.steps = DEFAULT_STEPS;
        tc.optimizer.horizon = DEFAULT_STEPS;
    }

    let mut variants: Vec<Variant> = (0..=max_order).map(Variant::Truncated).collect();
    variants.extend([Variant::Vanilla, Variant::Tp]);
    let mut rows = Vec::new();
    let mut processor = String::new();
    for v in variants {
        let mc = model_config(cfg, &ds, v, kernel)?;
        processor = format!("{:?}", mc.processor);
        let label = v.label();
        log::info!("finite-order study: {label}");
        let dir = cfg.out.join("runs").join(label.replace(['(', ')'], ""));
        let r = train_model(&ds, &data, mc, tc, &dir, None, tc.steps.max(1))?;
        rows.push(StudyRow {
            config: label,
            order: match v {
                Variant::Truncated(p) => Some(p),
                _ => None,
            },
            median_rel_l1: r.final_metrics.median_rel_l1,
            mse: r.final_metrics.mse,
            mae: r.final_metrics.mae,
            init_median_rel_l1: r.init_metrics.median_rel_l1,
            final_loss: r.final_loss,
            wall_time_s: r.wall_time_s,
        });
    }
    let all_finite = rows.iter().all(|r| r.median_rel_l1.is_finite() && r.mse.is_finite() && r.mae.is_finite());
    let report = StudyReport {
        reference: ReferenceTrend::default(),
        data: data.display().to_string(),
        seed: cfg.seed,
        steps: tc.steps,
        kernel,
        processor,
        rows,
        all_finite,
    };
    crate::write_json(&cfg.out.join("finite_order_study.json"), &report)?;
    crate::write_csv(&cfg.out.join("finite_order_study.csv"), &report.rows)?;
    if !all_finite {
        return Err(CliError::ChecksFailed(vec!["finite_errors".into()]));
    }
    Ok(report)
}
