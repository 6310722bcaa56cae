//! The JSON run configuration shared by every command.
//!
//! ```json
//! {
//!   "data":     { "synth": { "n_images": 200, "size": 64, "seed": 0, ... } },
//!   "model":    { "generator": { ... }, "discriminator": { ... }, "semantic": { ... } },
//!   "training": { "learning_rate": 0.002, "batch_size": 4, "epochs": 20, ... },
//!   "eval":     { "direction": "a_to_b", "cwssim": { ... }, "macenko": { ... } }
//! }
//! ```
//!
//! Every section and field is optional and falls back to its default; keys
//! that do not exist in the schema are rejected all at once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::MacenkoConfig;
use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::CwSsimConfig;
use crate::trainer::{Direction, ModelConfig, TrainingConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generator used by `normalize --method segcn|cyclegan`.
    pub direction: Direction,
    pub cwssim: CwSsimConfig,
    pub macenko: MacenkoConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let reference = serde_json::to_value(Self::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )));
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        self.model.generator.validate()?;
        self.training.validate(&self.model)?;
        if self.eval.cwssim.levels == 0 || self.eval.cwssim.orientations == 0 {
            return Err(Error::Config(
                "eval.cwssim needs at least one level and orientation".into(),
            ));
        }
        Ok(())
    }
}

/// Collects dotted paths of keys in `value` that the default `reference`
/// document does not have. Only objects present in both are descended into.
fn unknown_keys(value: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(v), Value::Object(r)) = (value, reference) else {
        return;
    };
    for (key, child) in v {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match r.get(key) {
            Some(rc) => unknown_keys(child, rc, &path, out),
            None => out.push(path),
        }
    }
}
