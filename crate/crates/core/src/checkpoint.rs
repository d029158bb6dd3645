//! Checkpoint directories: `manifest.json` plus one raw tensor blob per entry.
//!
//! Blob layout: row-major little-endian `f32`, no header. The manifest
//! records each tensor's shape, blob path (relative to the directory) and
//! the SHA-256 of the blob bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{device, tensor_bytes};

pub const FORMAT: &str = "storymaker-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn blob_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("tensors/{safe}.bin")
}

pub fn save(dir: &Path, kind: &str, meta: serde_json::Value, tensors: &[(String, Tensor)]) -> Result<Manifest> {
    fs::create_dir_all(dir.join("tensors"))?;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let bytes = tensor_bytes(t)?;
        let file = blob_name(name);
        fs::write(dir.join(&file), &bytes)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: "f32".into(),
            file,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        kind: kind.into(),
        meta,
        tensors: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::checkpoint(&path, format!("cannot read manifest: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::checkpoint(&path, format!("corrupt manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::checkpoint(
            &path,
            format!("unsupported format {:?}, expected {FORMAT:?}", manifest.format),
        ));
    }
    Ok(manifest)
}

/// Loads every tensor (as `f32`) after verifying sizes and digests.
pub fn load(dir: &Path) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    let manifest = read_manifest(dir)?;
    let mut out = BTreeMap::new();
    for e in &manifest.tensors {
        let path: PathBuf = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| {
            Error::checkpoint(&path, format!("missing blob for tensor {}: {err}", e.name))
        })?;
        let numel: usize = e.shape.iter().product();
        if bytes.len() != numel * 4 {
            return Err(Error::checkpoint(
                &path,
                format!("tensor {}: expected {} bytes, found {}", e.name, numel * 4, bytes.len()),
            ));
        }
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(Error::checkpoint(&path, format!("tensor {}: digest mismatch", e.name)));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.insert(e.name.clone(), Tensor::from_vec(data, e.shape.as_slice(), &device())?);
    }
    Ok((manifest, out))
}

/// SHA-256 over the manifest's tensor digests, identifying a checkpoint's weights.
pub fn weights_hash(manifest: &Manifest) -> String {
    let mut h = Sha256::new();
    for e in &manifest.tensors {
        h.update(e.name.as_bytes());
        h.update(e.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

/// What a command ran with, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    /// Weights hash of every checkpoint read or written, by role.
    pub checkpoints: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        Ok(Self {
            command: command.to_string(),
            config_sha256: hex::encode(Sha256::digest(serde_json::to_vec(&config)?)),
            checkpoints: BTreeMap::new(),
            seeds: BTreeMap::new(),
            config,
        })
    }

    /// Records the weights hash of the checkpoint in `dir`.
    pub fn checkpoint(mut self, role: &str, dir: &Path) -> Result<Self> {
        let m = read_manifest(dir)?;
        self.checkpoints.insert(role.to_string(), weights_hash(&m));
        Ok(self)
    }

    pub fn seed(mut self, role: &str, seed: u64) -> Self {
        self.seeds.insert(role.to_string(), seed);
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
