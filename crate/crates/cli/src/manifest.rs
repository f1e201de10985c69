//! Per-stage manifests: checksums of everything a stage read and wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

/// Digest of a serializable configuration section.
pub fn config_hash<T: Serialize>(section: &T) -> String {
    sha256_bytes(&serde_json::to_vec(section).expect("config serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub config_hash: String,
    /// Wall-clock seconds: `total` plus any per-item entries.
    pub timings: BTreeMap<String, f64>,
    pub inputs: BTreeMap<PathBuf, String>,
    pub outputs: BTreeMap<PathBuf, String>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, seed: u64, workers: usize, config_hash: String) -> Self {
        Manifest {
            stage: stage.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            workers,
            config_hash,
            timings: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn hash_outputs(&mut self, paths: &[PathBuf]) -> CliResult<()> {
        for p in paths {
            self.outputs.insert(p.clone(), sha256_file(p)?);
        }
        Ok(())
    }

    /// True when a previous run with the same settings read exactly the
    /// given inputs and its outputs are still intact.
    pub fn is_current(&self, config_hash: &str, inputs: &BTreeMap<PathBuf, String>) -> bool {
        self.version == env!("CARGO_PKG_VERSION")
            && self.config_hash == config_hash
            && &self.inputs == inputs
            && self.outputs.iter().all(|(p, sum)| sha256_file(p).is_ok_and(|s| &s == sum))
    }
}

/// Current checksums of `paths`; a missing input is a data error.
pub fn checksum_all(paths: &[PathBuf]) -> CliResult<BTreeMap<PathBuf, String>> {
    paths.iter().map(|p| Ok((p.clone(), sha256_file(p)?))).collect()
}

/// Confirms that files recorded by an upstream stage are unchanged.
pub fn verify_recorded(recorded: &BTreeMap<PathBuf, String>, stage: &str) -> CliResult<()> {
    for (path, expected) in recorded {
        let actual = sha256_file(path)?;
        if &actual != expected {
            return Err(CliError::Data(format!(
                "checksum mismatch for {}: sha256 {actual}, but {stage} recorded {expected}; rerun {stage}",
                path.display()
            )));
        }
    }
    Ok(())
}
