//! Run manifests written next to every artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use glyco_core::preprocess::DATASET_VERSION;
use glyco_core::seqgen::CHECKPOINT_VERSION;
use serde::{Deserialize, Serialize};

use crate::config::{hex_digest, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub glyco: String,
    pub checkpoint_format: u32,
    pub dataset_format: u32,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            glyco: env!("CARGO_PKG_VERSION").to_string(),
            checkpoint_format: CHECKPOINT_VERSION,
            dataset_format: DATASET_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex_digest(&bytes),
        })
    }
}

/// Everything needed to regenerate a run: `glyco --config <manifest> <command>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: RunConfig,
    pub versions: Versions,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_secs: f64,
}

impl RunManifest {
    pub fn write(
        config: &RunConfig,
        command: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        elapsed: Duration,
    ) -> Result<PathBuf, CliError> {
        let manifest = Self {
            command: command.to_string(),
            seed: config.seed,
            config_sha256: config.hash(),
            config: config.clone(),
            versions: Versions::current(),
            inputs: inputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
            outputs: outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_, _>>()?,
            wall_time_secs: elapsed.as_secs_f64(),
        };
        let path = config.out(&format!("{command}.manifest.json"));
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, json + "\n").map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
