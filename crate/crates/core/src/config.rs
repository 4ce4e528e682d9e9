//! Experiment configuration files and global seed resolution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::TaskGenConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::router::RouterConfig;
use crate::train::TrainConfig;

/// Fallback for `--seed` when the flag is absent.
pub const SEED_ENV: &str = "TTMOE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSuiteConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for TaskSuiteConfig {
    fn default() -> Self {
        Self { count: 6, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedConfig {
    /// Examples per task; absent means the smallest task's split size.
    pub per_task: Option<usize>,
    pub seed: u64,
}

/// Everything one toy experiment needs, as read from a preset file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub tasks: TaskSuiteConfig,
    pub generator: TaskGenConfig,
    pub train: TrainConfig,
    pub router: RouterConfig,
    pub mixed: MixedConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.tasks.count == 0 {
            return Err(Error::Config("tasks.count must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies one seed to task generation, expert and router training and
    /// mixing. The base model's seed is part of its identity and is kept.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.tasks.seed = seed;
        self.train.seed = seed;
        self.router.seed = seed;
        self.mixed.seed = seed;
        self
    }
}

/// `--seed` if given, else `TTMOE_SEED`, else none.
pub fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
