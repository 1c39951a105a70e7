//! Run manifest: a small JSON record written next to every command's
//! artifacts so a run can be identified and reproduced later.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub seed: u64,
    pub rng_algorithm: &'static str,
    pub started_at: String,
    pub finished_at: String,
    /// Paths of the files this run produced, as written.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn begin(command: &str, config_digest: Option<String>, seed: u64) -> Self {
        Self {
            tool: "sepctl",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_digest,
            seed,
            rng_algorithm: sepctl::rng::RNG_ALGORITHM,
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: String::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn record(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// Stamps the finish time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        self.finished_at = chrono::Utc::now().to_rfc3339();
        let path = dir.join("manifest.json");
        self.artifacts.push(path.display().to_string());
        let body = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::create_dir_all(dir)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;
        fs::write(&path, body + "\n")
            .map_err(|e| CliError::config(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}
