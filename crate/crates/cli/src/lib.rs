//! Command implementations behind the `ikno` binary.
//!
//! Every command takes a [`RunConfig`], writes its artifacts under
//! `config.out` and returns a serializable report. The binary prints the
//! report as JSON and maps failures to exit codes.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use ikno_core::data::DataError;
use ikno_core::kernels::KernelError;
use ikno_core::linalg::LinalgError;
use ikno_core::model::ModelError;
use ikno_core::resolvent::ResolventError;
use ikno_core::store::StoreError;
use ikno_core::train::TrainError;

pub mod bench;
pub mod config;
pub mod gen;
pub mod run;
pub mod study;
pub mod verify;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown key `{key}` for command {command}")]
    UnknownKey { command: String, key: String },
    #[error("unknown dataset kind `{0}` (expected csines, poisson-gauss or advection)")]
    UnknownKind(String),
    #[error("dataset not found at {0}")]
    MissingDataset(PathBuf),
    #[error("checkpoint not found at {0}")]
    MissingCheckpoint(PathBuf),
    #[error("failed checks: {}", .0.join(", "))]
    ChecksFailed(Vec<String>),
    #[error("loss became non-finite at step {step}; last good checkpoint at {checkpoint}")]
    Diverged { step: u64, checkpoint: PathBuf },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Resolvent(#[from] ResolventError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes serializable rows as CSV with a header from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
