//! Run configuration: one TOML file whose keys map 1:1 onto the typed
//! model/training config fields.

use aga_core::model::AgaConfig;
use aga_core::train::TrainConfig;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed: model initialization, batching, and dropout all derive
    /// from it. Overridden by `--seed`, falling back to `AGA_SEED`.
    pub seed: u64,
    pub model: AgaConfig,
    pub train: TrainConfig,
    /// Evaluate only the final targeted timestep of each episode instead of
    /// all targeted timesteps.
    pub eval_final_only: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: AgaConfig::desk_default(),
            train: TrainConfig::default(),
            eval_final_only: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| UsageError(format!("model config: {e}")))?;
        self.train
            .validate()
            .map_err(|e| UsageError(format!("train config: {e}")))?;
        Ok(())
    }

    /// Apply the resolved master seed to every seeded subsystem.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// Seed precedence: explicit flag, then the config value (when nonzero),
/// then the AGA_SEED environment variable, then zero.
pub fn resolve_seed(flag: Option<u64>, config_seed: Option<u64>) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    if let Some(s) = config_seed {
        if s != 0 {
            return s;
        }
    }
    std::env::var("AGA_SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}
