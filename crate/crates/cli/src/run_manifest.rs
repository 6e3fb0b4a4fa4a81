//! Reproducibility sidecar written next to every output: command, resolved
//! configuration, seeds, input hashes, tool version, timestamps and output
//! paths. Timestamps are the only fields that vary between identical runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub tool_version: String,
    pub resolved_config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub input_hashes: BTreeMap<String, String>,
    pub output_paths: Vec<String>,
    pub started_at: String,
    pub finished_at: String,
}

pub struct ManifestBuilder {
    command: String,
    resolved_config: serde_json::Value,
    seeds: Vec<u64>,
    input_hashes: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    started_at: chrono::DateTime<chrono::Utc>,
}

impl ManifestBuilder {
    pub fn new(command: &str, resolved_config: serde_json::Value, seeds: Vec<u64>) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            resolved_config,
            seeds,
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            started_at: chrono::Utc::now(),
        }
    }

    /// Records the SHA-256 of an input file; silently skips virtual inputs.
    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        self.input_hashes
            .insert(path.display().to_string(), format!("{:x}", hasher.finalize()));
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `<first_output>.manifest.json` (or `manifest.json` in the
    /// output directory when outputs live in one).
    pub fn write(self, sidecar_of: &Path) -> Result<PathBuf> {
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            resolved_config: self.resolved_config,
            seeds: self.seeds,
            input_hashes: self.input_hashes,
            output_paths: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            started_at: self.started_at.to_rfc3339(),
            finished_at: chrono::Utc::now().to_rfc3339(),
        };
        let path = PathBuf::from(format!("{}.manifest.json", sidecar_of.display()));
        let text = serde_json::to_string_pretty(&manifest)?;
        vitlab_core::io::atomic_write(&path, text.as_bytes())?;
        Ok(path)
    }
}
