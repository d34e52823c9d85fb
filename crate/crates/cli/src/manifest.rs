//! Run manifest written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::{CliError, CliResult};

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

#[derive(Serialize, Debug)]
pub struct Manifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn start(command: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            started_unix: unix_now(),
            finished_unix: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Stamps the finish time and writes the manifest to `path`. Every listed
    /// output must already exist.
    pub fn finish(mut self, path: &Path) -> CliResult<()> {
        self.finished_unix = unix_now();
        if let Some(missing) = self.outputs.iter().find(|p| !p.exists()) {
            return Err(CliError::Core(dcsam_core::Error::CheckpointMissing(missing.clone())));
        }
        write_json(path, &self)
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    dcsam_core::io::atomic_write(path, &bytes)?;
    Ok(())
}
