//! Key-sorted JSON output so byte equality of files is meaningful.

use serde::Serialize;
use serde_json::{Map, Value};

fn sort_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut sorted = Map::new();
            for (k, v) in entries {
                sorted.insert(k, sort_keys(v));
            }
            Value::Object(sorted)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Pretty, key-sorted document terminated by a newline.
pub fn to_canonical_pretty<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = sort_keys(serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

/// Single-line, key-sorted record (no trailing newline).
pub fn to_canonical_line<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = sort_keys(serde_json::to_value(value)?);
    serde_json::to_string(&v)
}
