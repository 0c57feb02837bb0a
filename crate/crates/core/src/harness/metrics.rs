use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Append-only JSON-lines event stream. Every line is
/// `{"kind": ..., "step": <env steps>, ...payload}`.
pub struct MetricsSink {
    out: Option<BufWriter<File>>,
    events: Vec<Value>,
    keep: bool,
}

impl MetricsSink {
    /// Write to `path`, truncating it. With `keep`, events are also kept
    /// in memory.
    pub fn create(path: &Path, keep: bool) -> Result<Self> {
        Ok(Self { out: Some(BufWriter::new(File::create(path)?)), events: Vec::new(), keep })
    }

    pub fn in_memory() -> Self {
        Self { out: None, events: Vec::new(), keep: true }
    }

    pub fn emit(&mut self, kind: &str, step: u64, payload: &impl Serialize) -> Result<()> {
        let mut obj = Map::new();
        obj.insert("kind".into(), Value::String(kind.into()));
        obj.insert("step".into(), Value::from(step));
        match serde_json::to_value(payload)? {
            Value::Object(fields) => {
                for (k, v) in fields {
                    if k != "kind" && k != "step" {
                        obj.insert(k, v);
                    }
                }
            }
            Value::Null => {}
            other => {
                obj.insert("value".into(), other);
            }
        }
        let event = Value::Object(obj);
        if let Some(out) = &mut self.out {
            serde_json::to_writer(&mut *out, &event)?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        if self.keep {
            self.events.push(event);
        }
        Ok(())
    }

    pub fn events(&self) -> &[Value] {
        &self.events
    }
}

/// Parse a stream, rejecting any line that is not a JSON object with
/// `kind` and `step`.
pub fn read_metrics(path: &Path) -> Result<Vec<Value>> {
    let file = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if v.get("kind").and_then(Value::as_str).is_none() || v.get("step").and_then(Value::as_u64).is_none() {
            return Err(Error::Format(format!("{}:{}: missing kind or step", path.display(), i + 1)));
        }
        out.push(v);
    }
    Ok(out)
}
