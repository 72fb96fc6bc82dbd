//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0        8 bytes   magic "LWCTCKPT"
//! 8        u64       manifest length M in bytes
//! 16       M bytes   UTF-8 JSON manifest
//! 16+M     ...       tensor data, f64 little-endian, row-major
//! ```
//!
//! The manifest is `{"tensors": [{"name", "shape", "dtype", "offset",
//! "len"}, ...]}` sorted by name, with `offset` and `len` in bytes relative
//! to the start of the data section and `dtype` always `"f64"`. Tensors are
//! stored back to back in manifest order, so identical contents produce
//! identical files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LWCTCKPT";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

pub type TensorMap = BTreeMap<String, Tensor>;

pub fn encode(tensors: &TensorMap) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let len = (t.numel() * 8) as u64;
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            len,
        });
        offset += len;
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    for t in tensors.values() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("manifest runs past end of file"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    let mut out = TensorMap::new();
    for e in manifest.tensors {
        if e.dtype != "f64" {
            return Err(bad(&format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.len as usize != numel * 8 {
            return Err(bad(&format!("{}: length does not match shape", e.name)));
        }
        let (lo, hi) = (e.offset as usize, (e.offset + e.len) as usize);
        if hi > data.len() {
            return Err(bad(&format!("{}: data runs past end of file", e.name)));
        }
        let vals = data[lo..hi]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if out.insert(e.name.clone(), Tensor::new(e.shape, vals)?).is_some() {
            return Err(bad(&format!("duplicate tensor {}", e.name)));
        }
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &TensorMap) -> Result<()> {
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TensorMap> {
    decode(&std::fs::read(path)?)
}
