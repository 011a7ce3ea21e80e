use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Every config key after defaults and overrides, as `key = value` lines.
    pub resolved_config: String,
    pub inputs: Vec<FileEntry>,
    /// Files written by the run, relative to the output directory.
    pub files: Vec<FileEntry>,
    pub dataset_checksum: Option<String>,
    pub checkpoint_checksums: BTreeMap<String, String>,
    pub metric_files: Vec<String>,
    pub nfe: BTreeMap<String, u64>,
    pub notes: BTreeMap<String, serde_json::Value>,
    pub wall_clock_seconds: f64,
}

/// Output directory that records every file it writes.
pub struct RunDir {
    root: PathBuf,
    started: Instant,
    pub manifest: RunManifest,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl RunDir {
    pub fn create(root: &Path, command: &str, seed: u64, resolved_config: String) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        Ok(RunDir {
            root: root.to_path_buf(),
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                seed,
                resolved_config,
                inputs: Vec::new(),
                files: Vec::new(),
                dataset_checksum: None,
                checkpoint_checksums: BTreeMap::new(),
                metric_files: Vec::new(),
                nfe: BTreeMap::new(),
                notes: BTreeMap::new(),
                wall_clock_seconds: 0.0,
            },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `bytes` to `name`, replacing any earlier entry for it. Returns
    /// the checksum.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<String> {
        std::fs::write(self.path(name), bytes)?;
        let sha = sha256_hex(bytes);
        self.manifest.files.retain(|f| f.path != name);
        self.manifest.files.push(FileEntry {
            path: name.to_string(),
            sha256: sha.clone(),
            bytes: bytes.len() as u64,
        });
        Ok(sha)
    }

    pub fn record_input(&mut self, path: &Path) -> Result<String> {
        let bytes = std::fs::read(path)?;
        let sha = sha256_hex(&bytes);
        self.manifest.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha.clone(),
            bytes: bytes.len() as u64,
        });
        Ok(sha)
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.manifest.notes.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Writes the manifest itself; it is not listed among its own files.
    pub fn finish(&mut self) -> Result<RunManifest> {
        self.manifest.wall_clock_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.path(MANIFEST_NAME), text)?;
        Ok(self.manifest.clone())
    }
}
