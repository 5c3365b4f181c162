//! The experiment config file: one JSON document holding the dataset recipe,
//! the training setup, the split choice, and where artifacts go. Every field
//! has a default, so `{}` is a valid file and the file itself is optional.
//! Unknown keys are rejected up front — a typo should fail loudly, not
//! silently run the default it was trying to override.
//!
//! Precedence: command-line flags > config file > built-in defaults.

use std::path::{Path, PathBuf};

use enrank_core::{DatasetSpec, Stream, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub paths: Paths,
}

/// Leave-one-domain-out split parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    /// Domain held out of training and used only for the final test.
    pub target_domain: usize,
    /// Fraction of each source (category, domain) cell held out for
    /// checkpoint selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { target_domain: 0, val_fraction: 0.1, seed: 0 }
    }
}

/// Where each command reads and writes its artifacts, unless a flag says
/// otherwise. Relative paths resolve against the working directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub meta: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub eval_report: PathBuf,
    pub audit_report: PathBuf,
    pub embeddings: PathBuf,
    pub gradcheck_report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "dataset.jsonl".into(),
            meta: "dataset.meta.json".into(),
            checkpoint: "model.ckpt".into(),
            metrics: "metrics.json".into(),
            eval_report: "eval.json".into(),
            audit_report: "audit.json".into(),
            embeddings: "embeddings.csv".into(),
            gradcheck_report: "gradcheck.json".into(),
        }
    }
}

impl ExperimentConfig {
    /// Read a config file, or the all-defaults config when no file is given.
    /// A missing file is an I/O failure; a file that parses but does not
    /// match the schema is a usage error with the parser's diagnostics.
    pub fn load(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
        let Some(path) = path else { return Ok(ExperimentConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    /// Derive every subsystem seed from one master seed: each consumer gets
    /// its own named stream (`dataset`, `split`, `train`), so no draw is
    /// shared and adding a consumer later cannot shift the existing ones.
    pub fn apply_master_seed(&mut self, seed: u64) {
        let root = Stream::from_seed(seed);
        self.dataset.seed = subseed(&root, "dataset");
        self.split.seed = subseed(&root, "split");
        self.train.seed = subseed(&root, "train");
    }
}

fn subseed(root: &Stream, label: &str) -> u64 {
    root.child(label).next_u64()
}
