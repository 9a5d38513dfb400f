//! Loading an experiment config from JSON with dotted-path overrides.

use std::path::Path;

use acl::harness::ExperimentConfig;
use serde_json::Value;

/// A configuration problem, reported with the offending key path.
#[derive(Debug)]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.key.is_empty() {
            write!(f, "invalid config: {}", self.reason)
        } else {
            write!(f, "invalid config at `{}`: {}", self.key, self.reason)
        }
    }
}

impl std::error::Error for ConfigError {}

fn err(key: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.into(),
        reason: reason.into(),
    }
}

fn parse(value: Value) -> Result<ExperimentConfig, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        err(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })
}

/// Reads `path` (or the defaults when `None`), applies `overrides` of the
/// form `a.b.c=value`, and validates the result.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| err("", format!("{}: {e}", p.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| err("", format!("{}: {e}", p.display())))?;
            parse(v)?
        }
        None => ExperimentConfig::default(),
    };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    for o in overrides {
        apply(&mut value, o)?;
    }
    let config = parse(value)?;
    config.validate().map_err(|e| match e {
        acl::Error::Config { key, reason } => err(key, reason),
        other => err("", other.to_string()),
    })?;
    Ok(config)
}

/// Sets one `a.b.c=value` override. The value is read as JSON when it
/// parses, otherwise as a string. The key must already exist.
pub fn apply(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| err(assignment, "override must look like key.path=value"))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| err(key, "no such key"))?;
    }
    *cur = new;
    Ok(())
}
