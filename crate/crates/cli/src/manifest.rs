//! Provenance record written next to every command's artifacts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stgan_core::checkpoint::write_atomic;
use stgan_core::{Error, Result};

pub const MANIFEST_NAME: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    /// The effective configuration after overrides, as TOML.
    pub config: String,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub deterministic: bool,
    pub started_at: String,
    pub finished_at: Option<String>,
    /// Checkpoints this run started from.
    pub inputs: Vec<CheckpointRef>,
    /// Checkpoints and other artifacts this run produced.
    pub outputs: Vec<CheckpointRef>,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    /// Content id for checkpoints; absent for plain files.
    pub id: Option<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config_path: Option<&Path>, config: String, seed: Option<u64>, out: &Path, deterministic: bool) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            seed,
            out: out.to_path_buf(),
            deterministic,
            started_at: now(),
            finished_at: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn input(&mut self, path: &Path, id: Option<String>) {
        self.inputs.push(CheckpointRef { path: path.to_path_buf(), id });
    }

    pub fn output(&mut self, path: &Path, id: Option<String>) {
        self.outputs.push(CheckpointRef { path: path.to_path_buf(), id });
    }

    /// Stamps the finish time and writes `dir/run_manifest.json`.
    pub fn finish(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_at = Some(now());
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_vec_pretty(&self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&path, &json)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
