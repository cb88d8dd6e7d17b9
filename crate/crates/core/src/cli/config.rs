use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::{CliError, CliResult};

/// Recursively overlays `src` onto `dst`; objects merge, everything else replaces.
pub fn merge_json(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (dst, src) => *dst = src,
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_set(root: &mut Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set {spec:?}: expected KEY=VALUE")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("--set {spec:?}: malformed key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(CliError::Usage(format!(
                "--set {spec:?}: {} is not an object",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one part")
}

fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("reading config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// `base`, overlaid with the config file, overlaid with `--set` overrides.
pub fn resolve_config<T: Serialize + DeserializeOwned>(
    base: &T,
    file: Option<&Path>,
    sets: &[String],
) -> CliResult<T> {
    let mut value = serde_json::to_value(base).expect("config serializes");
    if let Some(path) = file {
        merge_json(&mut value, read_json(path)?);
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    from_value(value)
}

pub(super) fn from_value<T: DeserializeOwned>(value: Value) -> CliResult<T> {
    serde_json::from_value(value).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
}

pub(super) fn load_json_file(path: &Path) -> CliResult<Value> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn set_creates_and_overrides() {
        let mut v = json!({"mixup": {"alpha": 4.0, "enabled": true}, "seed": 0});
        apply_set(&mut v, "mixup.enabled=false").unwrap();
        apply_set(&mut v, "seed=7").unwrap();
        apply_set(&mut v, "impute_mode=soft").unwrap();
        assert_eq!(v, json!({"mixup": {"alpha": 4.0, "enabled": false}, "seed": 7, "impute_mode": "soft"}));
        assert!(apply_set(&mut v, "seed").is_err());
        assert!(apply_set(&mut v, "seed.x=1").is_err());
        assert!(apply_set(&mut v, ".a=1").is_err());
    }

    #[test]
    fn merge_is_recursive() {
        let mut v = json!({"a": {"b": 1, "c": 2}, "d": [1]});
        merge_json(&mut v, json!({"a": {"c": 3}, "d": [2, 3]}));
        assert_eq!(v, json!({"a": {"b": 1, "c": 3}, "d": [2, 3]}));
    }
}
