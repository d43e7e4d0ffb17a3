//! Layered run configuration: defaults, then a JSON file, then flags.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use enadpool::{ModelConfig, PoolMode, TrainConfig};

use crate::CliError;

/// Values given explicitly on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub mode: Option<PoolMode>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub n_max: Option<usize>,
    pub hops: Option<usize>,
}

fn object_of<T: serde::Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("configs serialize to objects"),
    }
}

/// Reads a flat JSON object whose keys are `ModelConfig` or `TrainConfig`
/// field names and layers `overrides` on top.
pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<(ModelConfig, TrainConfig), CliError> {
    let mut model = object_of(&ModelConfig::default());
    let mut train = object_of(&TrainConfig::default());
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(entries) = parsed else {
            return Err(CliError::Usage(format!("config {} must be a JSON object", path.display())));
        };
        for (key, value) in entries {
            if model.contains_key(&key) {
                model.insert(key, value);
            } else if train.contains_key(&key) {
                train.insert(key, value);
            } else {
                return Err(CliError::Usage(format!(
                    "unknown key `{key}` in config {}",
                    path.display()
                )));
            }
        }
    }
    let bad = |e: serde_json::Error| CliError::Usage(format!("invalid configuration: {e}"));
    let mut model: ModelConfig = serde_json::from_value(Value::Object(model)).map_err(bad)?;
    let mut train: TrainConfig = serde_json::from_value(Value::Object(train)).map_err(bad)?;

    let o = overrides;
    if let Some(v) = o.mode {
        model.mode = v;
    }
    if let Some(v) = o.n_max {
        model.n_max = v;
    }
    if let Some(v) = o.hops {
        model.hops = v;
    }
    if let Some(v) = o.folds {
        train.folds = v;
    }
    if let Some(v) = o.seed {
        train.seed = v;
    }
    if let Some(v) = o.epochs {
        train.max_epochs = v;
    }
    if let Some(v) = o.lr {
        train.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        train.batch_size = v;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, text: &str) -> std::path::PathBuf {
        let path = dir.path().join("run.json");
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn defaults_without_file_or_flags() {
        let (m, t) = resolve(None, &Overrides::default()).unwrap();
        assert_eq!(m, ModelConfig::default());
        assert_eq!(t, TrainConfig::default());
    }

    #[test]
    fn flags_override_file_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(&dir, r#"{"mode": "E", "learning_rate": 0.01, "hops": 3, "patience": 4}"#);
        let flags = Overrides {
            lr: Some(0.5),
            ..Overrides::default()
        };
        let (m, t) = resolve(Some(&path), &flags).unwrap();
        assert_eq!(m.mode, PoolMode::Edge);
        assert_eq!(m.hops, 3);
        assert_eq!(t.patience, 4);
        assert_eq!(t.learning_rate, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        for text in [r#"{"lr": 0.1}"#, r#"{"mode": "X"}"#, "[1]", "{", r#"{"folds": 1}"#] {
            let path = write(&dir, text);
            assert!(
                matches!(resolve(Some(&path), &Overrides::default()), Err(CliError::Usage(_))),
                "{text}"
            );
        }
    }
}
