//! Binary checkpoint format.
//!
//! ```text
//! magic   8 bytes   "CTEGCKPT"
//! version u32 LE
//! hlen    u64 LE    length of the JSON header
//! header  hlen bytes UTF-8 JSON: {"version":1,"config":...,"params":[{"name","shape"}...]}
//! values  f64 LE for each parameter, in header order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{CtegError, Result};

pub const MAGIC: &[u8; 8] = b"CTEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

pub fn to_bytes(config: &serde_json::Value, store: &ParamStore) -> Result<Vec<u8>> {
    let header = Header {
        version: VERSION,
        config: config.clone(),
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CtegError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + store.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore)> {
    let bad = |m: &str| CtegError::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic string"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CtegError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| CtegError::Checkpoint(e.to_string()))?;

    let mut store = ParamStore::new();
    let mut cursor = 20 + hlen;
    for entry in header.params {
        let count: usize = entry.shape.iter().product();
        let raw = bytes
            .get(cursor..cursor + count * 8)
            .ok_or_else(|| bad("truncated parameter data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor += count * 8;
        let id = store.add(entry.name, Tensor::new(entry.shape, data)?)?;
        store.get_mut(id).trainable = entry.trainable;
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after parameter data"));
    }
    Ok((header.config, store))
}

pub fn save(path: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let bytes = to_bytes(config, store)?;
    std::fs::write(path, bytes).map_err(|e| CtegError::io(path, e))
}

pub fn load(path: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let bytes = std::fs::read(path).map_err(|e| CtegError::io(path, e))?;
    from_bytes(&bytes)
}
