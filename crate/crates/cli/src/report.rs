use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub file: String,
    pub sha256: String,
}

/// Common wrapper of every command report.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub command: &'a str,
    /// Present and set to `NON-PRIVATE` when no privacy guarantee applies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub privacy_label: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub result: T,
}

pub fn digest(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Internal(format!("cannot read {}: {e}", path.display())))?;
    Ok(FileDigest {
        file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        sha256: hex(&Sha256::digest(&bytes)),
    })
}

pub fn digests(paths: &[&Path]) -> Result<Vec<FileDigest>, CliError> {
    paths.iter().map(|p| digest(p)).collect()
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("cannot create output directory {}: {e}", dir.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

/// Writes the report next to the outputs and returns its path.
pub fn write_report<T: Serialize>(dir: &Path, name: &str, envelope: &Envelope<'_, T>) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    write_json(&path, envelope)?;
    Ok(path)
}
