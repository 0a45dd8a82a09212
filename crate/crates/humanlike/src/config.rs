use std::fs;
use std::path::Path;

use humanlike_core::lm::ModelConfig;
use humanlike_core::lora::LoraConfig;
use humanlike_core::train::{PretrainConfig, TrainingConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::arena::ArenaConfig;
use crate::datagen::DatagenConfig;
use crate::error::{Error, Result};

/// Every configurable value, grouped by pipeline stage. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    pub training: TrainingConfig,
    pub datagen: DatagenConfig,
    pub arena: ArenaConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Points every seeded stage at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.pretrain.seed = seed;
        self.training.seed = seed;
        self.datagen.seed = seed;
        self.arena.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.lora.validate()?;
        self.training.validate()?;
        self.datagen.validate()?;
        Ok(())
    }

    /// Dotted names of every key at or under `path` (itself dotted), with
    /// default values.
    pub fn keys(path: &str) -> Vec<(String, String)> {
        let value = serde_json::to_value(Self::default()).expect("config serializes");
        let pointer = format!("/{}", path.replace('.', "/"));
        let mut out = Vec::new();
        if let Some(v) = value.pointer(&pointer) {
            flatten(path, v, &mut out);
        }
        out
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        leaf => out.push((prefix.to_string(), leaf.to_string())),
    }
}
