//! Flat key-value run configuration for `compress`.
//!
//! Keys: `method`, `model_in`, `corpus`, `out_dir`, `model_out`, `heldout`,
//! plus every [`TrainConfig`] field (`target_ratio`, `lambda1`, `lambda2`,
//! `d`, `lr`, `epochs`, `samples`, `seq_len`, `batch_size`, `seed`,
//! `clamp_guidance`, `dense_switch`, `weight_decay`, `clip_norm`,
//! `tanh_beta_scale`, `tanh_lr`, `gumbel_temperature`, `gumbel_lr`).

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::allocator::{Method, TrainConfig};
use crate::error::{AraError, Result};

pub type FlatConfig = Map<String, Value>;

const RUN_KEYS: [&str; 6] = ["method", "model_in", "corpus", "out_dir", "model_out", "heldout"];

#[derive(Clone, Debug, PartialEq)]
pub struct CompressSpec {
    pub method: Method,
    pub model_in: PathBuf,
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `out_dir/model.bin`.
    pub model_out: Option<PathBuf>,
    /// Fraction of the corpus held out from calibration.
    pub heldout: f64,
    pub train: TrainConfig,
}

impl CompressSpec {
    pub fn model_out_path(&self) -> PathBuf {
        self.model_out.clone().unwrap_or_else(|| self.out_dir.join("model.bin"))
    }

    /// Parses a flat map, reporting the first offending key.
    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        let train_keys = train_keys();
        let mut train_map = Map::new();
        for (k, v) in flat {
            if RUN_KEYS.contains(&k.as_str()) {
                continue;
            }
            if !train_keys.contains(k) {
                return Err(AraError::config(k.as_str(), "unknown key"));
            }
            let single: Map<String, Value> = [(k.clone(), v.clone())].into_iter().collect();
            serde_json::from_value::<TrainConfig>(Value::Object(single))
                .map_err(|e| AraError::config(k.as_str(), e.to_string()))?;
            train_map.insert(k.clone(), v.clone());
        }
        let train: TrainConfig =
            serde_json::from_value(Value::Object(train_map)).map_err(|e| AraError::config("config", e.to_string()))?;
        train.validate()?;

        let method = match flat.get("method") {
            None => Method::Ara,
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(AraError::config("method", "must be a string")),
        };
        let heldout = match flat.get("heldout") {
            None => 0.1,
            Some(v) => v
                .as_f64()
                .filter(|h| (0.0..1.0).contains(h))
                .ok_or_else(|| AraError::config("heldout", "must be a number in [0, 1)"))?,
        };
        Ok(CompressSpec {
            method,
            model_in: required_path(flat, "model_in")?,
            corpus: required_path(flat, "corpus")?,
            out_dir: optional_path(flat, "out_dir")?.unwrap_or_else(|| PathBuf::from("ara-out")),
            model_out: optional_path(flat, "model_out")?,
            heldout,
            train,
        })
    }

    /// Every key with its effective value.
    pub fn to_flat(&self) -> FlatConfig {
        let mut flat = match serde_json::to_value(&self.train) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        let path = |p: &Path| Value::String(p.display().to_string());
        flat.insert("method".into(), Value::String(self.method.as_str().into()));
        flat.insert("model_in".into(), path(&self.model_in));
        flat.insert("corpus".into(), path(&self.corpus));
        flat.insert("out_dir".into(), path(&self.out_dir));
        if let Some(p) = &self.model_out {
            flat.insert("model_out".into(), path(p));
        }
        flat.insert("heldout".into(), Value::from(self.heldout));
        flat
    }
}

fn train_keys() -> Vec<String> {
    match serde_json::to_value(TrainConfig::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

fn optional_path(flat: &FlatConfig, key: &str) -> Result<Option<PathBuf>> {
    match flat.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) if !s.is_empty() => Ok(Some(PathBuf::from(s))),
        Some(_) => Err(AraError::config(key, "must be a nonempty path string")),
    }
}

fn required_path(flat: &FlatConfig, key: &str) -> Result<PathBuf> {
    optional_path(flat, key)?.ok_or_else(|| AraError::config(key, "is required"))
}

/// Reads a TOML file of top-level keys.
pub fn load_toml(path: &Path) -> Result<FlatConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AraError::io(path, e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| AraError::config(path.display().to_string(), e.to_string()))?;
    match serde_json::to_value(&table) {
        Ok(Value::Object(m)) => {
            if let Some((k, _)) = m.iter().find(|(_, v)| v.is_object() || v.is_array()) {
                return Err(AraError::config(k.as_str(), "nested values are not supported"));
            }
            Ok(m)
        }
        _ => Err(AraError::config(path.display().to_string(), "expected a table of keys")),
    }
}
