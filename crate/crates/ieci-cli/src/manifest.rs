//! Per-run provenance record written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::{CliError, Result};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub duration_seconds: f64,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
}

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Tracks one command run; finishes by writing `run_manifest.json`.
pub struct RunTracker {
    command: String,
    seed: Option<u64>,
    started: Instant,
    outputs: Vec<PathBuf>,
}

impl RunTracker {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        RunTracker {
            command: command.to_string(),
            seed,
            started: Instant::now(),
            outputs: Vec::new(),
        }
    }

    /// Write a produced file and record it as an output.
    pub fn write_output(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(path, contents).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }

    /// Record a file some other writer produced.
    pub fn note_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Write `run_manifest.json` into `dir` with the resolved config echo.
    pub fn finish(self, dir: &Path, config: serde_json::Value) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            version: version_string(),
            seed: self.seed,
            duration_seconds: self.started.elapsed().as_secs_f64(),
            config,
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
        };
        let path = dir.join(RUN_MANIFEST_FILE);
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, body).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Create the output directory if needed.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })
}
