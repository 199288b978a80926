//! Experiment orchestration for the forgetting lab: config parsing, run
//! directories with manifests, dynamics reports, post-hoc finetuning, sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod sweep;

use std::path::{Path, PathBuf};

use forgetlab_core::data::DataError;
use forgetlab_core::dynamics::DynamicsError;
use forgetlab_core::engine::EngineError;
use forgetlab_core::nn::ModelError;
use forgetlab_core::replay::BufferError;
use thiserror::Error;

pub use commands::{cmd_dynamics, cmd_fpf, DynamicsOptions, FpfOptions};
pub use config::{parse_config, RunConfig};
pub use manifest::RunManifest;
pub use pipeline::{execute, rerun_manifest, RunOutcome, RunSummary};
pub use sweep::{run_sweep, SweepSpec};

/// Output root used when neither `--out` nor `FORGETLAB_OUT` is given.
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at `{field}`: {message}")]
    ConfigInvalid { field: String, message: String },
    #[error("bad manifest {path}: {message}")]
    BadManifest { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing snapshots: {0}")]
    MissingSnapshots(String),
    #[error("missing buffer dump {0}")]
    MissingBuffer(PathBuf),
    #[error("no run or sweep outputs in {0}")]
    NothingToReport(PathBuf),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").map_err(|e| io_err(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
