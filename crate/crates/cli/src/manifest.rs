use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::{data_at, CliError};

/// Everything a command wrote, plus what it needs to be rerun. No
/// timestamps, so reruns produce the same bytes.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<String>,
    pub checkpoints: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &'static str, config: Value, seeds: Value) -> Self {
        RunManifest {
            tool: "stegduel",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            seeds,
            inputs: Vec::new(),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Writes `manifest.json` into `dir` and returns its path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| data_at(&path, e))?;
        Ok(path)
    }
}

pub fn show(path: &Path) -> String {
    path.display().to_string()
}
