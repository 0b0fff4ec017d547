use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

/// Reproducibility record written next to every artifact. Rerunning
/// `command` with `config` reproduces the outputs byte for byte; only
/// `wall_time_secs` varies between runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_secs: f64,
    /// Command-specific figures, e.g. the trainable fraction.
    pub results: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub(crate) fn new(command: &str, config: BTreeMap<String, String>, seeds: Vec<u64>, started: Instant) -> Self {
        Self {
            command: command.into(),
            config,
            seeds,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            inputs: vec![],
            outputs: vec![],
            wall_time_secs: started.elapsed().as_secs_f64(),
            results: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub(crate) fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }
}
