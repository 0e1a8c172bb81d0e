//! Single JSON run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::inference::DEFAULT_K_GRID;
use crate::losses::LossConfig;
use crate::model::UNetConfig;
use crate::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub k_grid: Vec<usize>,
    /// Neighbour count of a freshly built index, before tuning.
    pub default_k: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            k_grid: DEFAULT_K_GRID.to_vec(),
            default_k: 5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_grid.is_empty() {
            return Err(Error::Config("inference.k_grid is empty".into()));
        }
        for &k in self.k_grid.iter().chain([&self.default_k]) {
            if k % 2 == 0 {
                return Err(Error::Config(format!("neighbour counts must be odd, got {k}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Root of every random stream in the run.
    pub seed: u64,
    pub unet: UNetConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            unet: UNetConfig::desk(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.unet.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.train.validate()?;
        self.inference.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Writes the resolved config as `config.resolved.json` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))
    }
}
