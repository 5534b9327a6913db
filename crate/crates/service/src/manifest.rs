//! Run manifests: what went in, what came out, and with which settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use abb_core::hash::content_hash;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

impl FileRecord {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        let data = std::fs::read(path)?;
        Ok(FileRecord { path: path.to_path_buf(), sha256: content_hash(&data), bytes: data.len() as u64 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub created_unix: u64,
    pub settings: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
}

impl Manifest {
    pub fn new(command: &str, settings: &impl Serialize) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            settings: serde_json::to_value(settings).unwrap_or(serde_json::Value::Null),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn input(mut self, path: &Path) -> std::io::Result<Self> {
        self.inputs.push(FileRecord::of(path)?);
        Ok(self)
    }

    pub fn output(mut self, path: &Path) -> std::io::Result<Self> {
        self.outputs.push(FileRecord::of(path)?);
        Ok(self)
    }

    /// Path of the manifest written next to `output`.
    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn write_next_to(&self, output: &Path) -> std::io::Result<PathBuf> {
        let path = Self::path_for(output);
        std::fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")?;
        Ok(path)
    }

    /// Recomputes every recorded hash; returns the paths that no longer match.
    pub fn verify(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .chain(&self.outputs)
            .filter(|r| FileRecord::of(&r.path).map(|now| now.sha256 != r.sha256).unwrap_or(true))
            .map(|r| r.path.clone())
            .collect()
    }
}
