//! Run manifest: what ran, with which config, producing which artifacts.
//! Timestamps honor SOURCE_DATE_EPOCH so reproducible pipelines get
//! bit-identical manifests; the data artifacts are bit-identical either way.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub output_dir: String,
    pub started: String,
    pub finished: String,
    pub config_fingerprint: String,
    pub artifacts: Vec<String>,
}

pub fn timestamp() -> String {
    let epoch = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<u64>().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
    format!("{epoch}")
}

pub struct ManifestBuilder {
    command: String,
    config_path: PathBuf,
    output_dir: PathBuf,
    started: String,
    fingerprint: String,
    artifacts: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, config_path: &Path, output_dir: &Path, fingerprint: String) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config_path: config_path.to_path_buf(),
            output_dir: output_dir.to_path_buf(),
            started: timestamp(),
            fingerprint,
            artifacts: Vec::new(),
        }
    }

    pub fn add(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }

    /// Writes `manifest.json` into the output directory and verifies every
    /// listed artifact exists.
    pub fn finish(self) -> Result<PathBuf> {
        for artifact in &self.artifacts {
            anyhow::ensure!(
                artifact.exists(),
                "manifest lists missing artifact {}",
                artifact.display()
            );
        }
        let manifest = RunManifest {
            command: self.command,
            config_path: self.config_path.display().to_string(),
            output_dir: self.output_dir.display().to_string(),
            started: self.started,
            finished: timestamp(),
            config_fingerprint: self.fingerprint,
            artifacts: self
                .artifacts
                .iter()
                .map(|p| {
                    p.strip_prefix(&self.output_dir)
                        .unwrap_or(p)
                        .display()
                        .to_string()
                })
                .collect(),
        };
        let path = self.output_dir.join("manifest.json");
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        std::fs::write(&path, json)?;
        Ok(path)
    }
}
