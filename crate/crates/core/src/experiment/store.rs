//! Artifact bookkeeping. Every artifact `F` has a sidecar `F.key` holding
//! the hash of everything it was computed from; an artifact whose sidecar
//! matches the expected key is reused instead of recomputed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the JSON form of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    hash_bytes(&serde_json::to_vec(value).expect("artifact keys serialize"))
}

pub fn hash_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    let mut file = fs::File::open(path)?;
    io::copy(&mut file, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

fn key_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".key");
    path.with_file_name(name)
}

/// Writes through a temporary file so readers never see a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_os_string();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn read_key(path: &Path) -> Option<String> {
    fs::read_to_string(key_path(path))
        .ok()
        .map(|s| s.trim().to_string())
}

/// Whether `path` exists and was produced under `key`.
pub fn is_fresh(path: &Path, key: &str) -> bool {
    path.exists() && read_key(path).as_deref() == Some(key)
}

pub fn mark(path: &Path, key: &str) -> io::Result<()> {
    write_atomic(&key_path(path), key.as_bytes())
}

/// Removes a stale sidecar before an artifact is rewritten.
pub fn unmark(path: &Path) -> io::Result<()> {
    match fs::remove_file(key_path(path)) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}
