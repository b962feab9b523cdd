//! Checkpoint layout: a directory holding `manifest.json` and `tensors.bin`.
//!
//! The manifest lists every tensor's name, shape and element offset; the blob
//! is the concatenation of all tensors, in manifest order, as little-endian
//! IEEE-754 doubles.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VERSION: &str = "spanex-ckpt-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element (not byte) offset into the blob.
    pub offset: usize,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub dtype: String,
    pub data_file: String,
    pub sha256: String,
    /// Model-level metadata (config, tokenizer settings).
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_tensors(tensors: &[(String, Vec<usize>, &[f64])]) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        for v in data.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += data.len();
    }
    (entries, blob)
}

pub fn write(dir: &Path, metadata: serde_json::Value, tensors: &[(String, Vec<usize>, &[f64])]) -> Result<Manifest> {
    let (entries, blob) = encode_tensors(tensors);
    let manifest = Manifest {
        version: VERSION.to_string(),
        dtype: "f64".to_string(),
        data_file: DATA_FILE.to_string(),
        sha256: hex_digest(&blob),
        metadata,
        tensors: entries,
    };
    atomic_write(&dir.join(DATA_FILE), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    atomic_write(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

/// Reads the manifest and returns each tensor's data in manifest order.
pub fn read(dir: &Path) -> Result<(Manifest, Vec<Vec<f64>>)> {
    let read_file = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
    };
    let manifest: Manifest = serde_json::from_slice(&read_file(MANIFEST_FILE)?)?;
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {:?}", manifest.version)));
    }
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    let blob = read_file(&manifest.data_file)?;
    if hex_digest(&blob) != manifest.sha256 {
        return Err(Error::Checkpoint("tensor blob checksum mismatch".into()));
    }
    let total: usize = manifest.tensors.iter().map(TensorEntry::numel).sum();
    if blob.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "blob has {} bytes, manifest describes {}",
            blob.len(),
            total * 8
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let bytes = &blob[entry.offset * 8..(entry.offset + entry.numel()) * 8];
        out.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    Ok((manifest, out))
}
