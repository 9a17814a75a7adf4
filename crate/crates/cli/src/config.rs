//! Run configuration files: a network config, a training config and an
//! optional dataset path, with unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vamkit::retrieval::config_hash;
use vamkit::training::TrainConfig;
use vamkit::NetworkConfig;

use crate::commands::UsageError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    /// Dataset directory, relative to the config file; `--data` overrides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

impl RunConfigFile {
    /// Parse and validate; every check runs before any work starts.
    pub fn load(path: &Path) -> anyhow::Result<RunConfigFile> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        if let Some(ds) = cfg.dataset.as_mut() {
            if ds.is_relative() {
                *ds = path.parent().unwrap_or(Path::new(".")).join(&*ds);
            }
        }
        cfg.validate().with_context(|| format!("validating {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.network
            .plan()
            .map_err(|e| UsageError(format!("network config: {e}")))?;
        self.train
            .validate()
            .map_err(|e| UsageError(format!("train config: {e}")))?;
        Ok(())
    }

    /// Hash of the network and training sections; the dataset location
    /// does not change results and is left out.
    pub fn hash(&self) -> String {
        config_hash(&(&self.network, &self.train))
    }
}
