use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written next to every command's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
    /// Artifact paths relative to the output directory, in write order.
    pub outputs: Vec<String>,
}

pub fn version_string() -> String {
    format!("fsmc-pose {} ({})", env!("CARGO_PKG_VERSION"), env!("FSMC_GIT_DESCRIBE"))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Collects artifact paths while a command runs.
pub struct RunRecorder {
    out: PathBuf,
    manifest: RunManifest,
}

impl RunRecorder {
    pub fn start(out: &Path, command: &str, config_hash: String, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
        let manifest = RunManifest {
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            config_hash,
            seed,
            version: version_string(),
            started_at: now(),
            finished_at: String::new(),
            outputs: Vec::new(),
        };
        Ok(Self { out: out.to_path_buf(), manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes `bytes` to `<out>/<name>` and records it.
    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        std::fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))?;
        self.record(name);
        Ok(path)
    }

    /// Records an artifact written by other means.
    pub fn record(&mut self, name: &str) {
        self.manifest.outputs.push(name.to_string());
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.finished_at = now();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        let path = self.out.join(MANIFEST_FILE);
        std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(self.manifest)
    }
}
