use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of each effective config, rendered canonically (after overrides).
    pub config_sha256: Vec<String>,
    /// Blob-style digest, `sha256("blob <len>\0" ‖ bytes)`, of each raw input file.
    pub input_digests: Vec<String>,
    pub master_seed: u64,
    pub duration_secs: f64,
    pub outputs: Vec<OutputFile>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn describe_output(dir: &Path, name: &str) -> Result<OutputFile, CliError> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(OutputFile {
        path: name.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

impl RunManifest {
    /// Writes `manifest.json` through a temporary file and a rename, so a
    /// reader never sees a partial manifest.
    pub fn write_atomic(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let target = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!(".{MANIFEST_FILE}.tmp"));
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, json + "\n").map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| CliError::io(&target, e))?;
        Ok(target)
    }
}
