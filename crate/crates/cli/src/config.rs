//! Experiment configuration: one JSON document per experiment.

use std::path::Path;

use itlsca::attack::AttackPlan;
use itlsca::dataset::{PermutationStream, SplitSpec};
use itlsca::preprocess::SelectionConfig;
use itlsca::sim::SimConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

fn d_perms() -> usize {
    100
}

fn d_cpa_top_k() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "d_perms")]
    pub n_permutations: usize,
    pub permutation_seed: u64,
    /// Size of the thermal CPA region.
    #[serde(default = "d_cpa_top_k")]
    pub cpa_top_k: usize,
}

impl EvalConfig {
    pub fn stream(&self) -> PermutationStream {
        PermutationStream {
            n_perms: self.n_permutations,
            base_seed: self.permutation_seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    /// Label used in reports instead of the one derived from the plan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub sim: SimConfig,
    pub split: SplitSpec,
    pub preprocess: SelectionConfig,
    pub attack: AttackPlan,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.format_version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "format_version {} is not supported (expected {CONFIG_VERSION})",
                self.format_version
            )));
        }
        self.sim.validate().map_err(config)?;
        self.attack.validate().map_err(config)?;
        let p = &self.preprocess;
        if !(p.sfs_target >= 1 && p.sfs_target <= p.rank_keep && p.rank_keep <= p.top_k) {
            return Err(CliError::Config(format!(
                "selection sizes must satisfy 1 <= sfs_target <= rank_keep <= top_k, got {}/{}/{}",
                p.sfs_target, p.rank_keep, p.top_k
            )));
        }
        let s = &self.split;
        if s.n_train == 0 || s.n_val == 0 || s.n_test == 0 {
            return Err(CliError::Config("split sizes must be positive".into()));
        }
        if self.eval.n_permutations == 0 || self.eval.cpa_top_k == 0 {
            return Err(CliError::Config("n_permutations and cpa_top_k must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn config(e: itlsca::Error) -> CliError {
    CliError::Config(e.to_string())
}
