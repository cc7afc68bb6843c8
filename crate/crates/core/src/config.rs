use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantization::check_bits;

/// Every knob of a streaming run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    /// Attention heads.
    pub heads: usize,
    /// Per-head channel width.
    pub d_head: usize,
    /// Embedding width of frame tokens.
    pub d_model: usize,
    /// Register tokens per frame.
    pub registers: usize,
    /// Patch tokens per frame.
    pub patches: usize,
    /// Query pooling group size over patch tokens.
    pub pooling: usize,
    /// Total cache capacity in tokens, first and current frames included.
    pub budget: usize,
    /// Quantization bit width.
    pub bits: u8,
    /// Quantization group size.
    pub group_size: usize,
    pub frames: usize,
    /// Inter-frame correlation of token embeddings, in `[0, 1)`.
    pub redundancy: f64,
    pub outlier_channels: usize,
    pub outlier_amp: f32,
    pub seed: u64,
    pub layers: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            d_head: 64,
            d_model: 128,
            registers: 4,
            patches: 64,
            pooling: 16,
            budget: 2048,
            bits: 4,
            group_size: 64,
            frames: 100,
            redundancy: 0.95,
            outlier_channels: 4,
            outlier_amp: 20.0,
            seed: 0,
            layers: 1,
        }
    }
}

/// Field names accepted in config files and overrides.
pub const FIELD_NAMES: &[&str] = &[
    "heads",
    "d_head",
    "d_model",
    "registers",
    "patches",
    "pooling",
    "budget",
    "bits",
    "group_size",
    "frames",
    "redundancy",
    "outlier_channels",
    "outlier_amp",
    "seed",
    "layers",
];

impl StreamConfig {
    /// Camera token plus registers.
    pub fn special_tokens(&self) -> usize {
        1 + self.registers
    }

    pub fn tokens_per_frame(&self) -> usize {
        1 + self.registers + self.patches
    }

    /// Checks ranges and that the budget can hold a first and a current frame.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heads", self.heads),
            ("d_head", self.d_head),
            ("d_model", self.d_model),
            ("patches", self.patches),
            ("pooling", self.pooling),
            ("group_size", self.group_size),
            ("frames", self.frames),
            ("layers", self.layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        check_bits(self.bits).map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.redundancy) {
            return Err(Error::Config(format!("redundancy {} outside [0, 1)", self.redundancy)));
        }
        if !(self.outlier_amp >= 1.0 && self.outlier_amp.is_finite()) {
            return Err(Error::Config(format!("outlier_amp {} below 1", self.outlier_amp)));
        }
        if self.outlier_channels > self.heads * self.d_head {
            return Err(Error::Config(format!(
                "{} outlier channels exceed {} key channels",
                self.outlier_channels,
                self.heads * self.d_head
            )));
        }
        let per_frame = self.tokens_per_frame();
        if self.budget < 2 * per_frame {
            return Err(Error::BudgetInfeasible {
                budget: self.budget,
                first: per_frame,
                current: per_frame,
            });
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads TOML or JSON, chosen by extension (`.json` is JSON, anything else TOML).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    /// Sets one field from its textual value.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        if !FIELD_NAMES.contains(&key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let mut map = match serde_json::to_value(&*self) {
            Ok(serde_json::Value::Object(m)) => m,
            _ => unreachable!("config serializes to an object"),
        };
        let parsed = serde_json::from_str::<serde_json::Value>(value)
            .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Config(format!("{key} = {value}: {e}")))?;
        Ok(())
    }
}
