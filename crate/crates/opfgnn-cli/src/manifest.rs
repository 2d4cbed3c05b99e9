//! Run manifests: every output directory gets exactly one `run_manifest.json`
//! recording the command, the resolved configuration, digests of every input
//! file, and the seed, so outputs can be reproduced bit-exactly. Timestamps
//! are informational and excluded from the determinism guarantee.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{io_failure, Failure};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    /// Resolved configuration the command actually ran with.
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
    /// Command-specific result summary.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

/// Collects start time and input digests as a command begins.
pub struct ManifestBuilder {
    command: &'static str,
    started_unix_s: u64,
    inputs: Vec<InputDigest>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl ManifestBuilder {
    pub fn new(command: &'static str) -> Self {
        Self { command, started_unix_s: unix_now(), inputs: Vec::new() }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        self.inputs.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(path)?,
        });
        Ok(())
    }

    /// Digests `manifest.json` and `samples.csv` of a dataset directory.
    pub fn dataset_inputs(&mut self, dir: &Path) -> Result<(), Failure> {
        self.input(&dir.join("manifest.json"))?;
        self.input(&dir.join("samples.csv"))
    }

    pub fn write(
        self,
        out_dir: &Path,
        config: serde_json::Value,
        seed: Option<u64>,
        workers: Option<usize>,
        summary: Option<serde_json::Value>,
    ) -> Result<PathBuf, Failure> {
        let manifest = RunManifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            inputs: self.inputs,
            seed,
            workers,
            started_unix_s: self.started_unix_s,
            finished_unix_s: unix_now(),
            summary,
        };
        let path = out_dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, body).map_err(|e| io_failure("writing", &path, e))?;
        Ok(path)
    }
}

pub fn sha256_hex(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| io_failure("reading", path, e))?;
    let digest = Sha256::digest(&bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    Ok(hex)
}
