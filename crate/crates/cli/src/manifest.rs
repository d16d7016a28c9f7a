use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const RUN_MANIFEST: &str = "run.json";

#[derive(Clone, Debug, Serialize)]
pub struct InputChecksum {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to a command's outputs. Kept out of the
/// primary outputs because it carries wall-clock times.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub inputs: Vec<InputChecksum>,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST);
        let json = serde_json::to_vec_pretty(self).map_err(CliError::runtime)?;
        fs::write(&path, json).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn walk(dir: &Path, base: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry.map_err(CliError::runtime)?.path();
        if path.is_dir() {
            walk(&path, base, out)?;
        } else {
            let rel = path.strip_prefix(base).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.push((rel, path));
        }
    }
    Ok(())
}

/// SHA-256 of a file, or for a directory of the sorted `path hash` lines of
/// every file below it (the run manifest itself excluded).
pub fn checksum(path: &Path) -> Result<InputChecksum> {
    let sha256 = if path.is_dir() {
        let mut files = Vec::new();
        walk(path, path, &mut files)?;
        files.retain(|(rel, _)| rel != RUN_MANIFEST);
        files.sort();
        let mut h = Sha256::new();
        for (rel, p) in files {
            h.update(format!("{rel} {}\n", hash_file(&p)?));
        }
        hex::encode(h.finalize())
    } else {
        hash_file(path)?
    };
    Ok(InputChecksum { path: path.display().to_string(), sha256 })
}
