//! Output-directory manifest: every command lists its artifacts with
//! content hashes and the hash of the config that produced them. No
//! timestamps — reruns of a seeded command produce byte-identical
//! manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory.
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::other(format!("cannot hash {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Writes `manifest.json` into `out_dir`, hashing the given artifacts
/// (paths must live under `out_dir`).
pub fn write_manifest(
    command: &str,
    config_hash: &str,
    seed: u64,
    out_dir: &Path,
    artifact_paths: &[PathBuf],
) -> Result<PathBuf, CliError> {
    let mut artifacts = Vec::with_capacity(artifact_paths.len());
    for p in artifact_paths {
        let rel = p
            .strip_prefix(out_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned();
        artifacts.push(Artifact {
            path: rel,
            sha256: sha256_file(p)?,
        });
    }
    artifacts.sort_by(|a, b| a.path.cmp(&b.path));

    let manifest = Manifest {
        command: command.to_string(),
        config_hash: config_hash.to_string(),
        seed,
        artifacts,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n")
        .map_err(|e| CliError::other(format!("cannot write manifest: {e}")))?;
    Ok(path)
}
