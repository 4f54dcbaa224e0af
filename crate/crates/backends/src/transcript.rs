//! Append-only JSON-lines log of backend traffic.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

/// Strings longer than this are replaced by a length marker.
const MAX_LOGGED_STRING: usize = 512;

#[derive(Debug)]
pub struct Transcript {
    path: PathBuf,
    file: Mutex<File>,
}

impl Transcript {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Append one record; a `ts` field (Unix seconds) is added.
    pub fn append(&self, mut record: Map<String, Value>) {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        record.insert("ts".into(), json!(ts));
        let line = Value::Object(record).to_string();
        let mut f = self.file.lock().unwrap_or_else(|e| e.into_inner());
        // Logging must never fail a backend call.
        let _ = writeln!(f, "{line}");
        let _ = f.flush();
    }

    /// Parse every record written so far.
    pub fn read_all(path: impl AsRef<Path>) -> std::io::Result<Vec<Value>> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
            Err(e) => return Err(e),
        };
        Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
    }
}

/// Copy of `v` with long strings (base64 payloads) elided.
pub fn redact(v: &Value) -> Value {
    match v {
        Value::String(s) if s.len() > MAX_LOGGED_STRING => Value::String(format!("<{} bytes elided>", s.len())),
        Value::Array(a) => Value::Array(a.iter().map(redact).collect()),
        Value::Object(o) => Value::Object(o.iter().map(|(k, v)| (k.clone(), redact(v))).collect()),
        other => other.clone(),
    }
}

/// Authorization header as it appears in logs.
pub fn redact_auth(token: Option<&str>) -> Value {
    match token {
        Some(_) => json!("Bearer ***"),
        None => Value::Null,
    }
}
