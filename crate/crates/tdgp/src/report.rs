//! Metric reports as `key=value` lines and JSON.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{io_err, Result};

/// Flattens a JSON value into sorted `a.b.c=value` lines.
pub fn key_values(value: &serde_json::Value) -> String {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<String>) {
        let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        match v {
            serde_json::Value::Object(m) => m.iter().for_each(|(k, v)| walk(&key(k), v, out)),
            serde_json::Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| walk(&key(&i.to_string()), v, out)),
            serde_json::Value::String(s) => out.push(format!("{prefix}={s}")),
            other => out.push(format!("{prefix}={other}")),
        }
    }
    let mut lines = Vec::new();
    walk("", value, &mut lines);
    lines.join("\n") + "\n"
}

/// Writes `<stem>.json` and `<stem>.txt` into `dir`; returns the text form.
pub fn write_report<T: Serialize>(dir: &Path, stem: &str, report: &T) -> Result<String> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let value = serde_json::to_value(report).expect("report serializes");
    let text = key_values(&value);
    let jp = dir.join(format!("{stem}.json"));
    fs::write(&jp, serde_json::to_string_pretty(&value).expect("json")).map_err(io_err(&jp))?;
    let tp = dir.join(format!("{stem}.txt"));
    fs::write(&tp, &text).map_err(io_err(&tp))?;
    Ok(text)
}
