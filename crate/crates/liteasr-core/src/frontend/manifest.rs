//! Dataset manifests: one record per line, `<path>\t<transcript>`.
//! Relative paths are resolved against the manifest's directory on read.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Audio (.wav) or feature (.shtn) file.
    pub path: PathBuf,
    pub transcript: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (p, transcript) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!(
                "{}:{}: expected <path>\\t<transcript>",
                path.display(),
                i + 1
            ))
        })?;
        let entry_path = PathBuf::from(p);
        let resolved = if entry_path.is_absolute() {
            entry_path
        } else {
            base.join(entry_path)
        };
        entries.push(ManifestEntry {
            path: resolved,
            transcript: transcript.to_string(),
        });
    }
    Ok(entries)
}

/// Write entries with the paths exactly as given (callers keep them relative
/// to the manifest location for portability).
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (p, transcript) in entries {
        writeln!(w, "{p}\t{transcript}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
