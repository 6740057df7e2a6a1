//! Run manifests: every output file is traceable to the config that
//! produced it. Manifests are the only artifacts carrying timestamps.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: String,
    pub created_unix_ms: u128,
    pub seeds: serde_json::Value,
    pub outputs: Vec<OutputEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl Manifest {
    pub fn new(command: &str, config_bytes: &[u8], seeds: serde_json::Value) -> Manifest {
        Manifest {
            command: command.to_string(),
            config_sha256: sha256_hex(config_bytes),
            created_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            seeds,
            outputs: Vec::new(),
        }
    }

    pub fn add_output(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::metadata(path)?.len();
        self.outputs.push(OutputEntry {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
            bytes,
        });
        Ok(())
    }

    pub fn write(&self, out_dir: &Path) -> anyhow::Result<PathBuf> {
        let path = out_dir.join(format!("{}_manifest.json", self.command.replace(' ', "_")));
        std::fs::write(&path, serde_json::to_vec_pretty(self)?)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
