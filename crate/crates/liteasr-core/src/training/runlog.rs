//! Append-only machine-readable run logs: one record per line, space
//! separated `key=value` pairs. No timestamps, so identical runs produce
//! byte-identical logs.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog::default()
    }

    pub fn record(&mut self, fields: &[(&str, String)]) {
        let line = fields
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        self.lines.push(line);
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// Values of `key` across all records, in order.
    pub fn values_of(&self, key: &str) -> Vec<String> {
        let prefix = format!("{key}=");
        self.lines
            .iter()
            .flat_map(|l| l.split(' '))
            .filter_map(|kv| kv.strip_prefix(&prefix))
            .map(str::to_string)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = self.lines.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.6e}")
}
