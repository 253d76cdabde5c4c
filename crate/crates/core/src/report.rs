use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Result;

pub const SCHEMA: &str = "cachetrap-report/1";

/// `{schema, stage, resolved_config, payload, metadata}` with object keys
/// sorted at every level. `metadata` is the only block allowed to vary
/// between otherwise identical runs.
pub fn envelope<C: Serialize, P: Serialize>(stage: &str, resolved_config: &C, payload: &P) -> Result<Value> {
    Ok(json!({
        "schema": SCHEMA,
        "stage": stage,
        "resolved_config": serde_json::to_value(resolved_config)?,
        "payload": serde_json::to_value(payload)?,
        "metadata": { "tool": "cachetrap", "version": env!("CARGO_PKG_VERSION") },
    }))
}

/// Pretty-printed canonical JSON (sorted keys, trailing newline).
pub fn to_canonical_string(value: &Value) -> Result<String> {
    let sorted = sort_keys(value.clone());
    let mut s = serde_json::to_string_pretty(&sorted)?;
    s.push('\n');
    Ok(s)
}

fn sort_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}
