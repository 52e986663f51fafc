//! Plain-text `key=value` configuration.
//!
//! Any serializable config struct is flattened to dotted keys
//! (`loop_cfg.tau1=0.001`). Lines starting with `#` and blank lines are
//! ignored. Overrides are type-checked against the current value.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => out.push((prefix.to_string(), "none".into())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Flattened `key=value` lines, keys in declaration order.
pub fn to_kv<T: Serialize>(cfg: &T) -> String {
    let v = serde_json::to_value(cfg).expect("config serializes");
    let mut pairs = Vec::new();
    flatten("", &v, &mut pairs);
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn slot<'v>(root: &'v mut Value, key: &str) -> Option<&'v mut Value> {
    let mut cur = root;
    for part in key.split('.') {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    Some(cur)
}

fn parse_like(old: &Value, key: &str, raw: &str) -> Result<Value, ConfigError> {
    let bad = |reason: &str| ConfigError::InvalidValue {
        key: key.to_string(),
        value: raw.to_string(),
        reason: reason.to_string(),
    };
    Ok(match old {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("expected true or false"))?),
        Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad("expected a non-negative integer"))?),
        Value::Number(n) if n.is_i64() => Value::from(raw.parse::<i64>().map_err(|_| bad("expected an integer"))?),
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("expected a number"))?;
            Value::from(x)
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Null if raw == "none" => Value::Null,
        Value::Null => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string())),
        Value::Array(_) | Value::Object(_) => return Err(bad("not a scalar setting")),
    })
}

/// Applies `(key, value)` overrides to `cfg`, checking keys and types.
pub fn apply<T, I, K, V>(cfg: &T, overrides: I) -> Result<T, ConfigError>
where
    T: Serialize + DeserializeOwned,
    I: IntoIterator<Item = (K, V)>,
    K: AsRef<str>,
    V: AsRef<str>,
{
    let mut root = serde_json::to_value(cfg).expect("config serializes");
    for (k, v) in overrides {
        let (k, v) = (k.as_ref().trim(), v.as_ref().trim());
        let s = slot(&mut root, k).ok_or_else(|| ConfigError::UnknownKey(k.to_string()))?;
        *s = parse_like(s, k, v)?;
    }
    serde_json::from_value(root).map_err(|e| ConfigError::InvalidValue {
        key: "<config>".into(),
        value: String::new(),
        reason: e.to_string(),
    })
}

/// Parses `key=value` text.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `from_kv(to_kv(cfg))` reproduces `cfg` when starting from `base`.
pub fn from_kv<T: Serialize + DeserializeOwned>(base: &T, text: &str) -> Result<T, ConfigError> {
    apply(base, parse_kv(text)?)
}

/// Stable hexadecimal fingerprint of a config.
pub fn fingerprint<T: Serialize>(cfg: &T) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(to_kv(cfg).as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::ExperimentConfig;

    #[test]
    fn roundtrip_and_overrides() {
        let base = ExperimentConfig::default();
        let text = to_kv(&base);
        assert!(text.contains("loop_cfg.tau1=0.0003\n"), "{text}");
        assert_eq!(from_kv(&base, &text).unwrap(), base);
        let c = apply(&base, [("loop_cfg.iterations", "3"), ("d_model", "32")]).unwrap();
        assert_eq!((c.loop_cfg.iterations, c.d_model), (3, 32));
        assert_eq!(
            apply(&base, [("nope", "1")]).unwrap_err(),
            ConfigError::UnknownKey("nope".into())
        );
        assert!(matches!(
            apply(&base, [("d_model", "-1")]),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert_eq!(parse_kv("a=1\nbad").unwrap_err(), ConfigError::Syntax { line: 2 });
    }
}
