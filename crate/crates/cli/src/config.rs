//! Run configuration: one JSON document, overridden by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use glyco_core::cohort::SimConfig;
use glyco_core::decision::{Approach, FinetuneConfig, SearchConfig, UtilityConfig};
use glyco_core::seqgen::ModelConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Input and output locations. Unset inputs default to the artifact of the
/// producing subcommand inside `out_dir`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub cohort: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub patients: usize,
    pub sim: SimConfig,
}

impl Default for CohortSection {
    fn default() -> Self {
        Self {
            patients: 100,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionSection {
    pub approach: Approach,
    /// Candidate treatments `U` for the joint approach.
    pub num_treatments: usize,
    /// Outcome draws `S` per candidate.
    pub num_outcomes: usize,
    pub search: SearchConfig,
    /// Midnight contexts decided per run.
    pub max_contexts: usize,
}

impl Default for DecisionSection {
    fn default() -> Self {
        Self {
            approach: Approach::Joint,
            num_treatments: 100,
            num_outcomes: 200,
            search: SearchConfig::default(),
            max_contexts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_splits: usize,
    /// Outcome draws behind predictive quantiles and PIT values.
    pub samples: usize,
    /// Midnight windows scored per patient by `predict` (0 = all).
    pub max_windows: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_splits: 30,
            samples: 100,
            max_windows: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub cohort: CohortSection,
    pub model: ModelConfig,
    pub utility: UtilityConfig,
    pub decision: DecisionSection,
    pub finetune: FinetuneConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Reads a config file. A run manifest is accepted too; its embedded
    /// config is used, which reproduces the recorded run.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        let value = match value {
            serde_json::Value::Object(mut m) if m.contains_key("config_sha256") => m.remove("config").unwrap_or_default(),
            v => v,
        };
        serde_json::from_value(value).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.cohort.sim.validate()?;
        self.model.validate()?;
        self.utility.validate()?;
        self.finetune.validate()?;
        if self.cohort.patients == 0 {
            return Err(CliError::Validation("cohort.patients must be positive".into()));
        }
        if self.decision.num_treatments == 0 || self.decision.num_outcomes == 0 {
            return Err(CliError::Validation("decision.num_treatments and num_outcomes must be positive".into()));
        }
        if self.eval.n_splits == 0 || self.eval.samples == 0 {
            return Err(CliError::Validation("eval.n_splits and eval.samples must be positive".into()));
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serialises").as_bytes())
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out_dir.join(name)
    }

    pub fn cohort_path(&self) -> PathBuf {
        self.paths.cohort.clone().unwrap_or_else(|| self.out("cohort.jsonl"))
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.paths.dataset.clone().unwrap_or_else(|| self.out("dataset.bin"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.out("model.ckpt"))
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
