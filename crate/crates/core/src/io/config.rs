//! TOML run configuration for `train`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::train::{DataConfig, ModelConfig, OptimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Optimizer steps; also the schedule horizon.
    pub steps: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, IoError> {
        toml::from_str(text).map_err(|e| IoError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::file(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
