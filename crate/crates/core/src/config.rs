//! Run configuration: one JSON document holding the model, training and
//! data settings, with dotted-path overrides from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SplitStrategy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest file, relative to the data directory.
    pub manifest: PathBuf,
    pub split_strategy: SplitStrategy,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.csv"),
            split_strategy: SplitStrategy::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the data split and weight initialization; `train.seed` drives
    /// shuffling, augmentation and dropout.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.in_file(path))
    }

    /// Reads `path` when given, applies every `key.path=value` override in
    /// order and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg = cfg.with_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `value` is parsed as JSON, falling back to a plain string.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override `{assignment}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::invalid(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        serde_json::from_value(doc).map_err(|e| Error::invalid(format!("override `{assignment}`: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
