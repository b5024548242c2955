//! On-disk tensor store: a `manifest.json` plus one raw little-endian `f64`
//! blob per named array.
//!
//! Blobs carry no header; shapes and SHA-256 checksums live in the manifest
//! so the files can be read from any language with a few lines of code.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_EXT: &str = "f64le";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("checksum mismatch for array {0}")]
    ChecksumMismatch(String),
    #[error("array {name}: {detail}")]
    BadArray { name: String, detail: String },
    #[error("missing array {0}")]
    MissingArray(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("expected store kind {expected}, found {found}")]
    WrongKind { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub counts: BTreeMap<String, usize>,
    #[serde(default)]
    pub channel_names: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub arrays: Vec<ArrayEntry>,
    /// Free-form metadata owned by the store kind.
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A named collection of `f64` arrays plus descriptive metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorStore {
    pub kind: String,
    pub dim: Option<usize>,
    pub counts: BTreeMap<String, usize>,
    pub channel_names: BTreeMap<String, Vec<String>>,
    pub seed: Option<u64>,
    pub meta: serde_json::Value,
    arrays: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

impl TensorStore {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            dim: None,
            counts: BTreeMap::new(),
            channel_names: BTreeMap::new(),
            seed: None,
            meta: serde_json::Value::Null,
            arrays: Vec::new(),
        }
    }

    /// Adds (or replaces) an array. `values.len()` must equal the shape product.
    pub fn put(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(StoreError::BadArray {
                name: name.into(),
                detail: format!("{} values for shape {:?}", values.len(), shape),
            });
        }
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(StoreError::BadArray { name: name.into(), detail: "invalid array name".into() });
        }
        self.arrays.retain(|(k, _, _)| k != name);
        self.arrays.push((name.to_string(), shape, values));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.arrays
            .iter()
            .find(|(k, _, _)| k == name)
            .map(|(_, s, v)| (s.as_slice(), v.as_slice()))
            .ok_or_else(|| StoreError::MissingArray(name.into()))
    }

    /// Fetches an array and checks its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&[f64]> {
        let (s, v) = self.get(name)?;
        if s != shape {
            return Err(StoreError::BadArray { name: name.into(), detail: format!("shape {s:?}, expected {shape:?}") });
        }
        Ok(v)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(k, _, _)| k.as_str())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(StoreError::WrongKind { expected: kind.into(), found: self.kind.clone() });
        }
        Ok(())
    }

    /// Writes the manifest and all blobs into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut entries = Vec::with_capacity(self.arrays.len());
        for (name, shape, values) in &self.arrays {
            let file = format!("{name}.{BLOB_EXT}");
            let bytes = encode(values);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(io_err(&path))?;
            entries.push(ArrayEntry { name: name.clone(), shape: shape.clone(), file, sha256: sha256_hex(&bytes) });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            dim: self.dim,
            counts: self.counts.clone(),
            channel_names: self.channel_names.clone(),
            seed: self.seed,
            arrays: entries,
            meta: self.meta.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| StoreError::Manifest(e.to_string()))?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text + "\n").map_err(io_err(&path))?;
        Ok(manifest)
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(StoreError::UnsupportedVersion(manifest.format_version));
        }
        Ok(manifest)
    }

    /// Loads a store, verifying every checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let mut store = Self::new(manifest.kind);
        store.dim = manifest.dim;
        store.counts = manifest.counts;
        store.channel_names = manifest.channel_names;
        store.seed = manifest.seed;
        store.meta = manifest.meta;
        for e in manifest.arrays {
            if e.file.contains('/') || e.file.contains('\\') || e.file.contains("..") {
                return Err(StoreError::Manifest(format!("invalid blob path {}", e.file)));
            }
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(StoreError::ChecksumMismatch(e.name));
            }
            if bytes.len() % 8 != 0 {
                return Err(StoreError::BadArray { name: e.name, detail: "blob length not a multiple of 8".into() });
            }
            store.put(&e.name, e.shape, decode(&bytes))?;
        }
        Ok(store)
    }
}
