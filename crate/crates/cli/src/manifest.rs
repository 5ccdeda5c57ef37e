use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mhsa_core::tinynet::checkpoint::sha256_hex;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Record of one command invocation: effective configuration and the digest of
/// every file read or written.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub struct ManifestBuilder {
    command: String,
    config: BTreeMap<String, String>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: u128,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config: BTreeMap::new(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: now_ms(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.insert(key.to_string(), value.to_string());
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.inputs.push(path.into());
        self
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(path.into());
        self
    }

    /// Hashes all listed files and writes `run_manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<RunManifest> {
        let digests = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
            paths.iter().map(|p| FileDigest::of(p)).collect()
        };
        let inputs = digests(&self.inputs)?;
        let outputs = digests(&self.outputs)?;
        let mut identity = self.command.clone();
        identity.push_str(&serde_json::to_string(&self.config)?);
        for d in &inputs {
            identity.push_str(&d.sha256);
        }
        let manifest = RunManifest {
            run_id: sha256_hex(identity.as_bytes())[..16].to_string(),
            command: self.command.clone(),
            config: self.config.clone(),
            seed: self.seed,
            inputs,
            outputs,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        let path = dir.join("run_manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}
