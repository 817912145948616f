use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Reads a JSON object from `path`, or an empty object when no file is given.
pub fn read_object(path: Option<&Path>) -> Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    match serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?
    {
        Value::Object(m) => Ok(m),
        _ => bail!("config {} must hold a JSON object", path.display()),
    }
}

/// Overlays every flag that was given onto the config file values.
pub fn merge<A: Serialize + DeserializeOwned>(flags: &A, path: Option<&Path>) -> Result<A> {
    let mut merged = read_object(path)?;
    if let Value::Object(given) = serde_json::to_value(flags)? {
        merged.extend(given.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(Value::Object(merged)).context("invalid option values")
}

/// Sets `value` at the nested object path `keys`, creating objects on the way.
pub fn set_path(root: &mut Map<String, Value>, keys: &[&str], value: Value) {
    let (last, parents) = keys.split_last().expect("non-empty key path");
    let mut node = root;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if !entry.is_object() {
            *entry = Value::Object(Map::new());
        }
        node = entry.as_object_mut().unwrap();
    }
    node.insert(last.to_string(), value);
}

pub fn required<T>(v: Option<T>, key: &str) -> Result<T> {
    v.with_context(|| {
        format!(
            "missing `{key}`: pass --{} or set it in the config file",
            key.replace('_', "-")
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use serde_json::json;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Opts {
        a: Option<u32>,
        b: Option<String>,
    }

    #[test]
    fn flags_take_precedence_over_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"a": 1, "b": "file"}"#).unwrap();
        let got = merge(
            &Opts {
                a: Some(5),
                b: None,
            },
            Some(&p),
        )
        .unwrap();
        assert_eq!(
            got,
            Opts {
                a: Some(5),
                b: Some("file".into())
            }
        );
    }

    #[test]
    fn unknown_keys_and_non_objects_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"zzz": 1}"#).unwrap();
        assert!(merge(&Opts { a: None, b: None }, Some(&p)).is_err());
        std::fs::write(&p, "[1]").unwrap();
        assert!(read_object(Some(&p)).is_err());
    }

    #[test]
    fn nested_paths_are_created() {
        let mut m = Map::new();
        m.insert("train".into(), json!({"batch": 2}));
        set_path(&mut m, &["train", "steps"], json!(7));
        set_path(&mut m, &["seed"], json!(1));
        assert_eq!(
            Value::Object(m),
            json!({"train": {"batch": 2, "steps": 7}, "seed": 1})
        );
    }
}
