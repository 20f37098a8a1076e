//! Append-only JSONL metrics and the run manifest.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn code_version() -> String {
    format!("semvlp-harness {}", env!("CARGO_PKG_VERSION"))
}

/// One JSON object per line, each written with a single call and flushed,
/// so a reader never sees more than one partial line at the end.
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &impl Serialize) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// Every newline-terminated record of a metrics file; a partial last line
/// is skipped.
pub fn read_metrics(path: &Path) -> Result<Vec<serde_json::Value>> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    bytes[..complete]
        .split(|&b| b == b'\n')
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_slice(l).map_err(Into::into))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub corpus_hash: String,
    pub code_version: String,
    /// Checkpoint the run started from, if any.
    pub checkpoint: Option<PathBuf>,
    pub config: RunConfig,
}

/// Writes `config.json` and `manifest.json` into `dir`.
pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    manifest.config.save(&dir.join(CONFIG_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(manifest)? + "\n").map_err(|e| HarnessError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        let mut w = MetricsWriter::open(&path).unwrap();
        for step in 0..3 {
            w.write(&serde_json::json!({"step": step, "loss": 1.5})).unwrap();
        }
        let full = fs::read(&path).unwrap();
        for cut in 0..=full.len() {
            fs::write(&path, &full[..cut]).unwrap();
            let complete = full[..cut].iter().filter(|&&b| b == b'\n').count();
            assert_eq!(read_metrics(&path).unwrap().len(), complete, "cut at {cut}");
        }
    }

    #[test]
    fn appends_across_writers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(METRICS_FILE);
        MetricsWriter::open(&path).unwrap().write(&1).unwrap();
        MetricsWriter::open(&path).unwrap().write(&2).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![serde_json::json!(1), serde_json::json!(2)]);
    }
}
