//! Resolved run configuration, stored as TOML next to every run's outputs.
//!
//! Precedence, lowest first: built-in defaults, the config file, then
//! individual `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::DecoderConfig;
use crate::encoder::{EncoderConfig, EncoderMode};
use crate::label_codec::OrderingStrategy;
use crate::loss::LossConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("override {0:?} must look like section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub strategy: OrderingStrategy,
    /// Fixed sequence capacity; derived from the data when zero.
    pub capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Average Macro-F1 over every hierarchy label, not just those with
    /// support in gold or prediction.
    pub macro_all_labels: bool,
    /// 1 selects greedy decoding.
    pub beam_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            macro_all_labels: false,
            beam_width: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Reject samples whose label sets are not closed under ancestors
    /// instead of closing them.
    pub strict: bool,
    /// Directory of precomputed encoder states (precomputed mode only).
    pub precomputed: Option<String>,
    /// Directory with external label embeddings for decoder initialization.
    pub label_init: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub codec: CodecConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// Applies `section.key=value` overrides. Values are read as TOML
    /// literals and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut root = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.into()))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| ConfigError::BadOverride(o.into()))?;
            let value = parse_literal(raw.trim());
            let table = root
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ConfigError::BadOverride(o.into()))?;
            table.insert(field.to_string(), value);
        }
        let text = toml::to_string(&root).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_toml(&text)
    }

    /// Cross-section consistency checks.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.encoder.d_model != self.decoder.d_model {
            return invalid(format!(
                "encoder.d_model {} must equal decoder.d_model {}",
                self.encoder.d_model, self.decoder.d_model
            ));
        }
        if self.encoder.mode == EncoderMode::Precomputed && self.data.precomputed.is_none() {
            return invalid("precomputed encoder mode needs data.precomputed".into());
        }
        if self.eval.beam_width == 0 {
            return invalid("eval.beam_width must be at least 1".into());
        }
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&probe) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
