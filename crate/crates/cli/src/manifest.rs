//! Run manifests: every command records its effective arguments, input
//! hashes, and output hashes next to the artifact it produced, so a run can
//! be replayed and byte-compared later.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileStamp {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Effective argument vector after config-file expansion, excluding the
    /// binary name.
    pub argv: Vec<String>,
    pub seed: u64,
    pub inputs: Vec<FileStamp>,
    pub outputs: Vec<FileStamp>,
    /// Files written as streams (progress logs); not byte-compared on
    /// replay because they carry wall-clock times.
    pub logs: Vec<String>,
    pub wall_ms: u64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

pub fn stamp(path: &Path) -> Result<FileStamp, CliError> {
    Ok(FileStamp {
        path: path.display().to_string(),
        sha256: sha256_file(path)?,
    })
}

pub fn manifest_path(primary_output: &Path) -> PathBuf {
    let mut name = primary_output
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    name.push_str(".manifest.json");
    primary_output.with_file_name(name)
}

/// Writes the manifest atomically next to the primary output.
pub fn write_manifest(manifest: &RunManifest, primary_output: &Path) -> Result<PathBuf, CliError> {
    let path = manifest_path(primary_output);
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::internal(format!("manifest serialization: {e}")))?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, json.as_bytes())
        .map_err(|e| CliError::user(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, &path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::user(format!("{}: bad manifest: {e}", path.display())))
}
