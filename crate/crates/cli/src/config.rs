//! Layered run configuration: built-in defaults, then a `key = value` file,
//! then command-line overrides. Keys are dotted paths into the serialized
//! config, e.g. `meta.alpha` or `fleet.clusters.0.center.a0`.

use std::collections::BTreeMap;
use std::path::Path;

use metafollower::pipeline::ExperimentConfig;
use metafollower::style::{QuantileScheme, ThresholdTable};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSettings {
    pub thresholds: ThresholdTable,
    /// Recompute thresholds from the data by quantiles instead of using the
    /// table above.
    pub derive: bool,
    pub quantiles: QuantileScheme,
}

impl Default for StyleSettings {
    fn default() -> Self {
        Self {
            thresholds: ThresholdTable::default(),
            derive: false,
            quantiles: QuantileScheme::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub style: StyleSettings,
    /// Write a parameter checkpoint every this many outer steps; 0 disables.
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn defaults(seed: u64) -> Self {
        Self {
            experiment: ExperimentConfig::desk_scale().with_seed(seed),
            style: StyleSettings::default(),
            checkpoint_every: 100,
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON form.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(&self.to_value()).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Parses a config file: one `key = value` per line, `#` starts a comment.
pub fn parse_file(text: &str, name: &str) -> Result<Vec<Override>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!("{name}:{}: expected key = value", i + 1)));
        };
        out.push(Override {
            key: k.trim().to_string(),
            value: v.trim().to_string(),
            origin: format!("{name}:{}", i + 1),
        });
    }
    Ok(out)
}

pub fn parse_assignment(s: &str, origin: &str) -> Result<Override, CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("{origin}: expected KEY=VALUE, got {s:?}")))?;
    Ok(Override {
        key: k.trim().to_string(),
        value: v.trim().to_string(),
        origin: origin.to_string(),
    })
}

/// Leaf paths of a JSON value. Arrays of scalars are leaves; arrays of
/// objects are indexed.
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        let join = |k: &str| {
            if prefix.is_empty() {
                k.to_string()
            } else {
                format!("{prefix}.{k}")
            }
        };
        match v {
            Value::Object(m) => {
                for (k, x) in m {
                    walk(&join(k), x, out);
                }
            }
            Value::Array(a) if a.iter().any(|x| x.is_object()) => {
                for (i, x) in a.iter().enumerate() {
                    walk(&join(&i.to_string()), x, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

fn parse_scalar(raw: &str, like: &Value, o: &Override) -> Result<Value, CliError> {
    let bad = |what: &str| CliError::usage(format!("{}: {} expects {what}, got {raw:?}", o.origin, o.key));
    if matches!(raw, "none" | "null") {
        return Ok(Value::Null);
    }
    match like {
        Value::Number(_) => match serde_json::from_str::<Value>(raw) {
            Ok(v @ Value::Number(_)) => Ok(v),
            _ => Err(bad("a number")),
        },
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad("true or false")),
        Value::String(_) => Ok(Value::String(raw.to_string())),
        _ => Ok(match raw {
            "" => Value::Null,
            _ => serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
        }),
    }
}

fn parse_value(raw: &str, like: &Value, o: &Override) -> Result<Value, CliError> {
    match like {
        Value::Array(items) => {
            let parts: Vec<&str> = raw.trim_matches(|c| c == '[' || c == ']').split(',').map(str::trim).collect();
            if parts.len() != items.len() {
                return Err(CliError::usage(format!(
                    "{}: {} expects {} comma-separated values",
                    o.origin,
                    o.key,
                    items.len()
                )));
            }
            let like = items.first().cloned().unwrap_or(Value::Null);
            Ok(Value::Array(
                parts.iter().map(|p| parse_scalar(p, &like, o)).collect::<Result<_, _>>()?,
            ))
        }
        _ => parse_scalar(raw, like, o),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(m) => {
                if last {
                    m.insert(p.to_string(), value);
                    return;
                }
                m.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(a) => {
                let idx: usize = p.parse().expect("validated index");
                if last {
                    a[idx] = value;
                    return;
                }
                &mut a[idx]
            }
            _ => unreachable!("validated path"),
        };
    }
}

/// Applies `overrides` in order on top of the defaults. The base seed is
/// resolved first so that per-stage seeds follow it unless set explicitly.
pub fn resolve(overrides: &[Override]) -> Result<RunConfig, CliError> {
    let mut seed = 0u64;
    for o in overrides.iter().filter(|o| o.key == "seed") {
        seed = o
            .value
            .parse()
            .map_err(|_| CliError::usage(format!("{}: seed expects an unsigned integer, got {:?}", o.origin, o.value)))?;
    }
    let mut value = RunConfig::defaults(seed).to_value();
    let leaves = flatten(&value);
    for o in overrides {
        let like = leaves
            .get(&o.key)
            .ok_or_else(|| CliError::usage(format!("{}: unknown config key {:?}", o.origin, o.key)))?;
        let parsed = parse_value(&o.value, like, o)?;
        set_path(&mut value, &o.key, parsed);
    }
    serde_json::from_value(value).map_err(|e| CliError::usage(format!("invalid configuration: {e}")))
}

/// Resolved config from an optional file plus command-line overrides.
pub fn load(file: Option<&Path>, cli: &[Override]) -> Result<RunConfig, CliError> {
    let mut all = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        all.extend(parse_file(&text, &path.display().to_string())?);
    }
    all.extend_from_slice(cli);
    resolve(&all)
}

/// The resolved config as a `key = value` file that [`load`] reads back.
pub fn to_file(cfg: &RunConfig) -> String {
    let mut out = String::new();
    for (k, v) in flatten(&cfg.to_value()) {
        let text = match &v {
            Value::Array(a) => a.iter().map(Value::to_string).collect::<Vec<_>>().join(", "),
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {text}\n"));
    }
    out
}
