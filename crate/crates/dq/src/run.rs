//! Run manifests: what was run, with which configuration, on which bytes.
//!
//! Everything except `metadata` is deterministic for identical inputs and
//! configuration. `digest` is the SHA-256 of the manifest serialized without
//! `metadata` and `digest`, so two runs can be compared by that field alone.

use std::fs::File;
use std::io::{self, BufReader};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use dq_core::sampler::RNG_ALGORITHM;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_VERSION: u32 = 1;

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    io::copy(&mut BufReader::new(File::open(path)?), &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn hash(role: &str, path: &Path) -> io::Result<Self> {
        Ok(Self { role: role.into(), path: path.display().to_string(), sha256: sha256_file(path)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub created_unix_secs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub rng: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    #[serde(default)]
    pub digest: String,
    pub metadata: RunMetadata,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        let created_unix_secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Self {
            version: RUN_VERSION,
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            rng: RNG_ALGORITHM.into(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            digest: String::new(),
            metadata: RunMetadata { created_unix_secs },
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> io::Result<()> {
        self.inputs.push(FileRecord::hash(role, path)?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> io::Result<()> {
        self.outputs.push(FileRecord::hash(role, path)?);
        Ok(())
    }

    /// SHA-256 over the deterministic part of the manifest.
    pub fn compute_digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("manifest serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("metadata");
            obj.remove("digest");
        }
        sha256_bytes(&serde_json::to_vec(&value).expect("value serializes"))
    }

    pub fn write(mut self, path: &Path) -> crate::formats::Result<()> {
        self.digest = self.compute_digest();
        crate::formats::write_json(path, &self)
    }
}
