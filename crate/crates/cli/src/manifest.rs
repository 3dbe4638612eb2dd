use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    /// Sweep value as written on the command line; `None` outside sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis_value: Option<String>,
    pub config_hash: String,
    /// Relative to the manifest's directory.
    pub dir: PathBuf,
    pub status: RunStatus,
}

/// One document per CLI invocation, written once after every run finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub dataset: String,
    pub version: String,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<String>,
    pub runs: Vec<RunEntry>,
}

pub fn artifact_version() -> String {
    match option_env!("DTS_BUILD_REV") {
        Some(rev) => format!("{}+{rev}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

impl RunManifest {
    pub fn write(&self) -> CliResult<PathBuf> {
        let path = self.out_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    /// Accepts the manifest file or the directory holding it.
    pub fn read(path: &Path) -> CliResult<RunManifest> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)
            .map_err(|e| CliError::Validation(format!("cannot read manifest {}: {e}", file.display())))?;
        let mut manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: {e}", file.display())))?;
        manifest.out_dir = file.parent().unwrap_or(Path::new(".")).to_path_buf();
        for run in &manifest.runs {
            let dir = manifest.out_dir.join(&run.dir);
            if !dir.is_dir() {
                return Err(CliError::Validation(format!(
                    "manifest references missing run directory {}",
                    dir.display()
                )));
            }
        }
        Ok(manifest)
    }

    pub fn failed(&self) -> impl Iterator<Item = &RunEntry> {
        self.runs.iter().filter(|r| r.status != RunStatus::Completed)
    }
}
