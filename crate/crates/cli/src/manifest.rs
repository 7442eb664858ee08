//! Per-run manifest listing inputs and outputs with their hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, CliResult};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileEntry {
    pub fn of(path: &Path) -> CliResult<Self> {
        let data = fs::read(path).map_err(io_err(path))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&data),
            bytes: data.len() as u64,
        })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub version: String,
    pub output_dir: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: Option<FileEntry>,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub summary: BTreeMap<String, String>,
}

/// Collects inputs and outputs while a command runs.
pub struct ManifestBuilder {
    command: String,
    out: PathBuf,
    started: u64,
    config: Option<FileEntry>,
    inputs: Vec<FileEntry>,
    outputs: Vec<PathBuf>,
    summary: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn new(command: &str, out: &Path) -> Self {
        Self {
            command: command.to_string(),
            out: out.to_path_buf(),
            started: unix_now(),
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    pub fn config(&mut self, path: &Path) -> CliResult<()> {
        self.config = Some(FileEntry::of(path)?);
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileEntry::of(path)?);
        Ok(())
    }

    /// Write `data` to `name` inside the output directory and record it.
    pub fn write(&mut self, name: &str, data: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, data).map_err(io_err(&path))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    /// Record a file some other routine already wrote.
    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.insert(key.to_string(), value.to_string());
    }

    pub fn finish(self, seed: u64) -> CliResult<RunManifest> {
        let outputs = self
            .outputs
            .iter()
            .map(|p| FileEntry::of(p))
            .collect::<CliResult<Vec<_>>>()?;
        // identical command, inputs and seed give the same id
        let mut h = Sha256::new();
        h.update(self.command.as_bytes());
        h.update(seed.to_le_bytes());
        for e in self.config.iter().chain(&self.inputs) {
            h.update(e.sha256.as_bytes());
        }
        let manifest = RunManifest {
            run_id: hex::encode(&h.finalize()[..8]),
            command: self.command,
            version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            output_dir: self.out.display().to_string(),
            started_unix: self.started,
            finished_unix: unix_now(),
            config: self.config,
            inputs: self.inputs,
            outputs,
            summary: self.summary,
        };
        let text = toml::to_string(&manifest).expect("manifest serializes");
        let path = self.out.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(manifest)
    }
}

#[cfg(test)]
pub fn load_manifest(path: &Path) -> CliResult<RunManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text)
        .map_err(|e| crate::error::CliError::usage(format!("{}: {e}", path.display())))
}
