//! Run configuration file (TOML). Every field has a default, so an empty
//! file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{hex_digest, ModelConfig};
use crate::synthdata::DeformParams;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Edge length of generated cubic volumes.
    pub dims: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub seed: u64,
    pub deform: DeformParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dims: 32, train_pairs: 8, test_pairs: 4, seed: 7, deform: DeformParams::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.dims < 16 || !self.data.dims.is_multiple_of(16) {
            return Err(Error::Config(format!("data.dims must be a multiple of 16, got {}", self.data.dims)));
        }
        Ok(())
    }

    /// Hex SHA-256 over every field.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default_and_round_trips() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_override_and_hash() {
        let cfg = RunConfig::from_toml("[train]\nepochs = [2, 1, 1]\n[model.sem]\nn = 5\n").unwrap();
        assert_eq!(cfg.train.epochs, [2, 1, 1]);
        assert_eq!(cfg.model.sem.n, 5);
        assert_eq!(cfg.model.loss, RunConfig::default().model.loss);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        assert!(RunConfig::from_toml("[model.sem]\nn = 4\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlr = -1.0\n").is_err());
    }
}
