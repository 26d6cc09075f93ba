use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Written before any data file and rewritten when the run ends, so a run
/// that died midway is recognizable by `status = "running"`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_paths: Vec<String>,
    pub config_hashes: Vec<String>,
    pub seeds: Vec<u64>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub versions: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_paths: Vec<String>, config_hashes: Vec<String>, seeds: Vec<u64>) -> Self {
        let now = chrono::Utc::now();
        let short = config_hashes.first().map_or("", |h| &h[..12.min(h.len())]);
        let mut versions = BTreeMap::new();
        versions.insert("qntrpo".to_string(), qntrpo::VERSION.to_string());
        versions.insert("qntrpo-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            run_id: format!("{command}-{short}-{}", now.format("%Y%m%dT%H%M%S%.3fZ")),
            command: command.to_string(),
            config_paths,
            config_hashes,
            seeds,
            outputs: Vec::new(),
            status: RunStatus::Running,
            error: None,
            started_at: now.to_rfc3339(),
            finished_at: None,
            versions,
            notes: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_json(&dir.join("manifest.json"), self)
    }

    pub fn finish(&mut self, dir: &Path, result: &Result<(), CliError>) -> Result<(), CliError> {
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
        match result {
            Ok(()) => self.status = RunStatus::Complete,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(e.to_string());
            }
        }
        self.write(dir)
    }
}

pub fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Output(format!("{}: {e}", dir.display())))
}

pub fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn path_in(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

/// Formats an optional float for CSV: shortest round-trip text, or empty.
pub fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:?}")).unwrap_or_default()
}
