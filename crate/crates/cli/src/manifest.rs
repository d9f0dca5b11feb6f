// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-command manifests: inputs and outputs with their SHA-256 digests.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub params: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(sha256_bytes(&bytes))
}

/// Companion JSON files written next to tensor archives.
fn with_sidecar(p: &Path) -> Vec<PathBuf> {
    let mut v = vec![p.to_path_buf()];
    let mut s = p.as_os_str().to_owned();
    s.push(".json");
    let side = PathBuf::from(s);
    if side.exists() {
        v.push(side);
    }
    v
}

/// Files under `p`, recursively and sorted, or `p` itself.
fn expand(p: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if p.is_dir() {
        let mut out = Vec::new();
        for e in std::fs::read_dir(p).with_context(|| format!("listing {}", p.display()))? {
            out.extend(expand(&e?.path())?);
        }
        out.sort();
        Ok(out)
    } else {
        Ok(with_sidecar(p))
    }
}

pub fn entries(paths: &[PathBuf], relative_to: Option<&Path>) -> anyhow::Result<Vec<FileEntry>> {
    let mut out = Vec::new();
    for p in paths {
        for f in expand(p)? {
            let shown = relative_to.and_then(|r| f.strip_prefix(r).ok()).unwrap_or(&f);
            out.push(FileEntry {
                path: shown.display().to_string(),
                sha256: sha256_file(&f)?,
            });
        }
    }
    Ok(out)
}
