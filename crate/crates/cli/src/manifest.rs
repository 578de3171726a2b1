use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::job::Job;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Record of one run: enough to redo it and to check that nothing drifted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    /// Config files the job snapshot was resolved from. Informational only;
    /// replay runs from the snapshot.
    #[serde(default)]
    pub config_files: Vec<FileDigest>,
    /// Data files the job reads at run time.
    #[serde(default)]
    pub inputs: Vec<FileDigest>,
    pub job: Job,
    /// Output names relative to the manifest's directory.
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(FileDigest {
        path: absolute(path).display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

pub fn absolute(path: &Path) -> PathBuf {
    std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf())
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// half-written file.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, &target).with_context(|| format!("cannot move {} into place", target.display()))?;
    Ok(())
}

/// Writes every output and then the manifest.
pub fn write_all(dir: &Path, outputs: &[(String, Vec<u8>)], manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    for (name, bytes) in outputs {
        write_atomic(dir, name, bytes)?;
    }
    write_atomic(dir, MANIFEST_NAME, &manifest_bytes(manifest)?)
}

pub fn manifest_bytes(m: &Manifest) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("malformed manifest {}", path.display()))
}
