//! Run configuration: built-in defaults, then an optional JSON file, then
//! `key.path=value` overrides, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vila_core::data::SynthConfig;
use vila_core::model::ModelConfig;
use vila_core::train::TrainConfig;
use vila_core::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
    pub explain: ExplainConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest; without one the synthetic dataset described by
    /// `synth` is generated in memory.
    pub manifest: Option<PathBuf>,
    /// Description JSON; defaults to the bundled set matching the classes.
    pub descriptions: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    #[default]
    NPrototypes,
    NContext,
    Shots,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::NPrototypes => "n_prototypes",
            SweepAxis::NContext => "n_context",
            SweepAxis::Shots => "shots",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            SweepAxis::NPrototypes => vec![1, 4, 8, 16, 32, 64],
            SweepAxis::NContext => vec![1, 4, 8, 16, 32],
            SweepAxis::Shots => vec![4, 8, 16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// `params.json` written by `vila train`.
    pub params: Option<PathBuf>,
    /// A `.vlmb` bag file.
    pub bag: Option<PathBuf>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `a.b.c=value` override. The value is read as JSON when it
/// parses, otherwise as a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let mut parts = path.split('.').peekable();
    while let Some(key) = parts.next() {
        let obj = match node {
            Value::Object(m) => m,
            other => {
                *other = Value::Object(Map::new());
                other.as_object_mut().expect("just replaced")
            }
        };
        if parts.peek().is_none() {
            obj.insert(key.to_string(), value);
            break;
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Config> {
    let mut value = serde_json::to_value(Config::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut value, patch);
    }
    for spec in overrides {
        apply_override(&mut value, spec)?;
    }
    let mut config: Config = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })?;
    if let Some(seed) = seed {
        config.synth.seed = seed;
        config.train.seed = seed;
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        std::fs::write(&file, r#"{"model": {"tau": 0.1, "n_prototypes": 4}, "train": {"runs": 2}}"#).unwrap();
        let cfg = resolve(
            Some(&file),
            &["model.n_prototypes=8".into(), "model.similarity=instance_max".into()],
            Some(42),
        )
        .unwrap();
        assert_eq!(cfg.model.tau, 0.1);
        assert_eq!(cfg.model.n_prototypes, 8);
        assert_eq!(cfg.model.similarity, vila_core::model::Similarity::InstanceMax);
        assert_eq!(cfg.train.runs, 2);
        assert_eq!(cfg.train.shots, 16);
        assert_eq!((cfg.synth.seed, cfg.train.seed), (42, 42));
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = resolve(None, &["model.n_protos=3".into()], None).unwrap_err();
        assert!(e.to_string().contains("n_protos"), "{e}");
        let e = resolve(None, &["synth.noise_std=loud".into()], None).unwrap_err();
        assert!(e.to_string().contains("synth.noise_std"), "{e}");
        assert!(resolve(None, &["novalue".into()], None).is_err());
        assert!(resolve(None, &["a..b=1".into()], None).is_err());
    }

    #[test]
    fn overrides_create_nested_values() {
        let mut v = serde_json::json!({"a": 1});
        apply_override(&mut v, "b.c=[1,2]").unwrap();
        apply_override(&mut v, "a.x=hello").unwrap();
        assert_eq!(v, serde_json::json!({"a": {"x": "hello"}, "b": {"c": [1, 2]}}));
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = resolve(None, &[], None).unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.model.tau, 1.0);
        assert_eq!(SweepAxis::Shots.default_values(), vec![4, 8, 16, 32, 64]);
    }
}
