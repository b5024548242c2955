//! `gen-data`: synthetic datasets written in the project store format.

use std::collections::BTreeMap;

use serde::Serialize;

use ikno_core::data::{gen_advection, gen_csines, gen_poisson_gauss, AdvectionSpec, CSinesSpec, Dataset, PoissonGaussSpec};
use ikno_core::train::TemporalMode;

use crate::{CliError, Result, RunConfig};

pub const KEYS: &[&str] = &[
    "kind",
    "num_train",
    "num_test",
    "n_in",
    "n_q",
    "max_mode",
    "amplitude",
    "decay",
    "solver_res",
    "min_sources",
    "max_sources",
    "n_points",
    "num_stamps",
    "dt",
    "mode",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenDataReport {
    pub kind: String,
    pub dir: String,
    pub dim: usize,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    /// Solver resolution `H` for finite-difference kinds.
    pub solver_res: Option<usize>,
    /// Array name to SHA-256 of its blob.
    pub checksums: BTreeMap<String, String>,
}

/// Builds the dataset described by `cfg` without touching the disk.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let kind = cfg.raw("kind").unwrap_or("csines");
    Ok(match kind {
        "csines" => {
            let d = CSinesSpec::default();
            gen_csines(&CSinesSpec {
                num_train: cfg.get("num_train", d.num_train)?,
                num_test: cfg.get("num_test", d.num_test)?,
                max_mode: cfg.get("max_mode", d.max_mode)?,
                amplitude: cfg.get("amplitude", d.amplitude)?,
                decay: cfg.get("decay", d.decay)?,
                n_in: cfg.get("n_in", d.n_in)?,
                n_q: cfg.get("n_q", d.n_q)?,
                seed: cfg.seed,
            })?
        }
        "poisson-gauss" => {
            let d = PoissonGaussSpec::default();
            gen_poisson_gauss(&PoissonGaussSpec {
                num_train: cfg.get("num_train", d.num_train)?,
                num_test: cfg.get("num_test", d.num_test)?,
                min_sources: cfg.get("min_sources", d.min_sources)?,
                max_sources: cfg.get("max_sources", d.max_sources)?,
                solver_res: cfg.get("solver_res", d.solver_res)?,
                n_in: cfg.get("n_in", d.n_in)?,
                n_q: cfg.get("n_q", d.n_q)?,
                seed: cfg.seed,
                ..d
            })?
        }
        "advection" => {
            let d = AdvectionSpec::default();
            let mode = match cfg.raw("mode") {
                None => d.mode,
                Some(m) => TemporalMode::parse(m).ok_or_else(|| CliError::Config(format!("mode: unknown `{m}`")))?,
            };
            gen_advection(&AdvectionSpec {
                num_train: cfg.get("num_train", d.num_train)?,
                num_test: cfg.get("num_test", d.num_test)?,
                n_points: cfg.get("n_points", d.n_points)?,
                num_stamps: cfg.get("num_stamps", d.num_stamps)?,
                dt: cfg.get("dt", d.dt)?,
                mode,
                seed: cfg.seed,
            })?
        }
        other => return Err(CliError::UnknownKind(other.to_string())),
    })
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataReport> {
    let ds = build_dataset(cfg)?;
    let manifest = ds.save(&cfg.out)?;
    let report = GenDataReport {
        kind: ds.kind.clone(),
        dir: cfg.out.display().to_string(),
        dim: ds.dim,
        seed: ds.seed,
        counts: manifest.counts.clone(),
        solver_res: ds.meta.get("solver_res").and_then(|v| v.as_u64()).map(|v| v as usize),
        checksums: manifest.arrays.iter().map(|a| (a.name.clone(), a.sha256.clone())).collect(),
    };
    Ok(report)
}
