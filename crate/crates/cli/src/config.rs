//! Flat dotted-key JSON configuration.
//!
//! A command's typed config is serialized to get the set of valid keys and
//! their defaults (`{"model.d_model": 64, ...}`). A config file may set any
//! subset of those keys, flags override on top, and the merged map is
//! folded back into nested JSON and deserialized. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub type FlatConfig = BTreeMap<String, Value>;

fn flatten_into(v: &Value, prefix: &str, out: &mut FlatConfig) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(child, &key, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

pub fn flatten(v: &Value) -> FlatConfig {
    let mut out = FlatConfig::new();
    flatten_into(v, "", &mut out);
    out
}

pub fn unflatten(flat: &FlatConfig) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("keys come from a flattened object");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Parses a flag value using the default's JSON type as a guide: strings
/// stay strings, arrays accept `a,b,c` as well as JSON, everything else is
/// parsed as JSON.
fn parse_override(key: &str, raw: &str, default: &Value) -> Result<Value> {
    let bad = || anyhow!("cannot parse `{raw}` for `{key}`");
    Ok(match default {
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(_) if !raw.trim_start().starts_with('[') => {
            if raw.trim().is_empty() {
                Value::Array(Vec::new())
            } else {
                let items = raw
                    .split(',')
                    .map(|s| serde_json::from_str(s.trim()).map_err(|_| bad()))
                    .collect::<Result<Vec<Value>>>()?;
                Value::Array(items)
            }
        }
        _ => serde_json::from_str(raw).map_err(|_| bad())?,
    })
}

/// Merges a config file and `key=value` overrides onto the defaults of `T`.
/// Returns the typed config and the resolved flat map.
pub fn resolve<T>(defaults: &T, file: Option<&Path>, overrides: &[(String, String)]) -> Result<(T, FlatConfig)>
where
    T: Serialize + DeserializeOwned,
{
    let mut flat = flatten(&serde_json::to_value(defaults)?);
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(obj) = v else {
            bail!("{}: config must be a JSON object", path.display());
        };
        for (k, v) in obj {
            if !flat.contains_key(&k) {
                bail!("{}: unknown config key `{k}`", path.display());
            }
            flat.insert(k, v);
        }
    }
    for (k, raw) in overrides {
        let default = flat.get(k).ok_or_else(|| anyhow!("unknown config key `{k}`"))?;
        let v = parse_override(k, raw, default)?;
        flat.insert(k.clone(), v);
    }
    let typed = serde_json::from_value(unflatten(&flat)).context("invalid configuration")?;
    Ok((typed, flat))
}

/// Splits `key=value`.
pub fn parse_set(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

pub fn write_resolved(dir: &Path, flat: &FlatConfig) -> Result<()> {
    let path = dir.join("resolved_config.json");
    let text = serde_json::to_string_pretty(flat)? + "\n";
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
