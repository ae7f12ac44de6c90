//! Run configuration: a TOML file layered over defaults, then `--set` overrides,
//! then dedicated flags. Every key is checked against the defaults so typos fail loudly.

use std::path::Path;

use aec_core::datagen::DataConfig;
use aec_core::eval::NlmsConfig;
use aec_core::model::ModelConfig;
use aec_core::train::TrainConfig;
use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelPreset {
    #[default]
    Full,
    Tiny,
}

impl ModelPreset {
    pub fn config(&self) -> ModelConfig {
        match self {
            ModelPreset::Full => ModelConfig::full(),
            ModelPreset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base architecture that `[model]` keys are applied on top of.
    pub model_preset: ModelPreset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub nlms: NlmsConfig,
}

impl RunConfig {
    fn defaults(preset: ModelPreset) -> Self {
        RunConfig {
            model: preset.config(),
            model_preset: preset,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            nlms: NlmsConfig::default(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// A problem with the configuration itself, reported as a usage error.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Every settable dotted key, including optional ones that default to unset.
pub fn valid_keys(preset: ModelPreset) -> Vec<String> {
    let mut keys = Vec::new();
    collect_keys(&base_value(preset), "", &mut keys);
    keys
}

fn base_value(preset: ModelPreset) -> Value {
    serde_json::to_value(RunConfig::defaults(preset)).expect("run config serializes")
}

fn collect_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                collect_keys(child, &key, out);
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

/// Overlays `user` onto `base`, refusing any key the base does not have.
fn merge(base: &mut Value, user: Value, prefix: &str, unknown: &mut Vec<String>) {
    let Value::Object(user) = user else {
        *base = user;
        return;
    };
    let Value::Object(target) = base else {
        // a table where the default is a scalar
        unknown.push(prefix.to_string());
        return;
    };
    for (k, v) in user {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match target.get_mut(&k) {
            Some(slot) if slot.is_object() || !v.is_object() => merge(slot, v, &key, unknown),
            _ => unknown.push(key),
        }
    }
}

/// Parses a `--set` value as TOML, falling back to a bare string.
fn parse_override(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => {
            serde_json::to_value(t.remove("v").expect("key present")).expect("toml to json")
        }
        Err(_) => Value::String(raw.to_string()),
    }
}

fn insert_dotted(root: &mut Map<String, Value>, key: &str, value: Value) {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut node = root;
    for p in parts {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()))
            .as_object_mut()
            .expect("override path crosses a scalar");
    }
    node.insert(last.to_string(), value);
}

/// Builds the effective configuration. `overrides` are `(dotted key, raw value)`
/// pairs applied after the file, in order.
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> anyhow::Result<RunConfig> {
    let mut user = Map::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        if let Value::Object(map) = serde_json::to_value(table).expect("toml to json") {
            user = map;
        }
    }
    for (key, value) in overrides {
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(ConfigError(format!("malformed key `{key}`")).into());
        }
        let crosses_scalar = {
            let mut node = &user;
            let parts: Vec<&str> = key.split('.').collect();
            let mut bad = false;
            for p in &parts[..parts.len() - 1] {
                match node.get(*p) {
                    Some(Value::Object(m)) => node = m,
                    Some(_) => {
                        bad = true;
                        break;
                    }
                    None => break,
                }
            }
            bad
        };
        if crosses_scalar {
            return Err(ConfigError(format!("`{key}` is not a table key")).into());
        }
        insert_dotted(&mut user, key, value.clone());
    }
    let preset = match user.get("model_preset") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|_| {
            ConfigError(format!(
                "model_preset must be \"full\" or \"tiny\", got {v}"
            ))
        })?,
        None => ModelPreset::Full,
    };
    let mut merged = base_value(preset.clone());
    let mut unknown = Vec::new();
    merge(&mut merged, Value::Object(user), "", &mut unknown);
    if !unknown.is_empty() {
        return Err(ConfigError(format!(
            "unknown config key(s): {}\nvalid keys:\n  {}",
            unknown.join(", "),
            valid_keys(preset).join("\n  ")
        ))
        .into());
    }
    let cfg: RunConfig =
        serde_json::from_value(merged).map_err(|e| ConfigError(format!("invalid config: {e}")))?;
    cfg.model
        .validate()
        .map_err(|e| ConfigError(e.to_string()))?;
    cfg.train
        .validate()
        .map_err(|e| ConfigError(e.to_string()))?;
    cfg.data
        .validate()
        .map_err(|e| ConfigError(e.to_string()))?;
    cfg.nlms
        .validate()
        .map_err(|e| ConfigError(e.to_string()))?;
    Ok(cfg)
}

/// Splits `key=value` into a key and a parsed value.
pub fn parse_assignment(raw: &str) -> Result<(String, Value), String> {
    let (k, v) = raw
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{raw}`"))?;
    Ok((k.trim().to_string(), parse_override(v.trim())))
}

pub fn number(v: f64) -> Value {
    serde_json::Number::from_f64(v)
        .map(Value::Number)
        .unwrap_or(Value::Null)
}

pub fn require_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| anyhow!("cannot create {}: {e}", path.display()))
}
