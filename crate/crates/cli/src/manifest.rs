//! Run manifest: resolved config, seeds, versions, timestamps and a hashed
//! inventory of every output file.

use std::path::{Path, PathBuf};

use forgetlab_core::rng::RNG_ALGORITHM;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{FpfSection, RunConfig};
use crate::{io_err, CliError, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Train,
    Fpf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the run directory, with `/` separators.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: Command,
    pub run_id: String,
    /// Fully resolved configuration of the continual run.
    pub config: RunConfig,
    /// Finetuning applied by `fpf` on top of `parent`'s run.
    #[serde(default)]
    pub finetune: Option<FpfSection>,
    /// Run directory `fpf` read its model and buffer from.
    #[serde(default)]
    pub parent: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub rng_algorithm: String,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn new(command: Command, config: RunConfig, started_at: String) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION,
            command,
            run_id: config.run_id.clone().unwrap_or_default(),
            seeds: vec![config.seed],
            config,
            finetune: None,
            parent: None,
            code_version: code_version(),
            rng_algorithm: RNG_ALGORITHM.to_string(),
            started_at,
            finished_at: String::new(),
            outputs: Vec::new(),
        }
    }

    /// Hash `files` (relative to `dir`), stamp the end time and write `manifest.json`.
    pub fn finish(&mut self, dir: &Path, files: &[String]) -> Result<()> {
        self.outputs = files
            .iter()
            .map(|f| {
                hash_file(&dir.join(f)).map(|(bytes, sha256)| OutputFile {
                    path: f.clone(),
                    bytes,
                    sha256,
                })
            })
            .collect::<Result<_>>()?;
        self.finished_at = now();
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::BadManifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Names of outputs whose current hash differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.outputs {
            let (bytes, sha) = hash_file(&dir.join(&f.path))?;
            if bytes != f.bytes || sha != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn hash_file(path: &Path) -> Result<(u64, String)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}
