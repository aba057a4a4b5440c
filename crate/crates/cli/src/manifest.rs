//! Run manifests: what was run, with which inputs, and when.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub configuration: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    /// Input path → lowercase hex SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, configuration: serde_json::Value, seed: Option<u64>, started_unix: f64) -> Self {
        RunManifest {
            command: command.to_string(),
            arguments: std::env::args().skip(1).collect(),
            configuration,
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix,
            finished_unix: started_unix,
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), digest_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    /// Writes `manifest.json` into `dir`, replacing any previous one.
    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.finished_unix = now_unix();
        let text = serde_json::to_string_pretty(&self)?;
        let path = dir.join(MANIFEST_NAME);
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_matches_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn digest_changes_with_any_byte() {
        let a = sha256_hex(b"study,y\na,1\n");
        let b = sha256_hex(b"study,y\na,0\n");
        assert_ne!(a, b);
    }
}
