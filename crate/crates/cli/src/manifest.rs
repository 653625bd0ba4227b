use std::fs;
use std::path::{Path, PathBuf};

use advrf::trainer::TrainConfig;
use advrf::{Error, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written at the root of every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    /// Git-style blob hash of `code_version`.
    pub code_hash: String,
    pub seed: u64,
    /// Full config in key=value form; loading it reproduces the run.
    pub config: String,
    pub started: String,
    pub finished: Option<String>,
    pub outputs: Vec<PathBuf>,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn code_version() -> String {
    format!("advrf {}", env!("CARGO_PKG_VERSION"))
}

/// SHA-256 over git's blob framing (`blob <len>\0<content>`).
pub fn blob_hash(content: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    format!("{:x}", h.finalize())
}

impl RunManifest {
    pub fn start(command: &str, config: &TrainConfig) -> Self {
        let version = code_version();
        RunManifest {
            command: command.to_string(),
            code_hash: blob_hash(&version),
            code_version: version,
            seed: config.seed,
            config: config.to_text(),
            started: now(),
            finished: None,
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::parse_str(&self.config)
    }

    /// Stamps the end time and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<Self> {
        self.finished = Some(now());
        self.outputs.sort();
        self.outputs.dedup();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self)
            .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::io(&path, std::io::Error::other(e)))
    }
}
