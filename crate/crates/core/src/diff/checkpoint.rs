//! `SGCK` parameter container: magic, u32 version, u32 header length, JSON
//! header, then every parameter as little-endian f32 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Mat, Scalar};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    params: Vec<ParamEntry>,
    step: u64,
    meta: serde_json::Value,
}

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        params: store
            .ids()
            .map(|id| {
                let (r, c) = store.get(id).shape();
                ParamEntry { name: store.name(id).to_string(), shape: [r, c] }
            })
            .collect(),
        step: store.step(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * store.num_scalars());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for &x in store.get(id).data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore<f32>, serde_json::Value)> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::SchemaVersionMismatch("not an SGCK checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersionMismatch(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| Error::CorruptRecord("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut store = ParamStore::new();
    let mut off = 12 + hlen;
    for p in header.params {
        let n = p.shape[0] * p.shape[1];
        let raw = bytes
            .get(off..off + 4 * n)
            .ok_or_else(|| Error::CorruptRecord(format!("truncated data for `{}`", p.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.register(p.name, Mat::from_vec(p.shape[0], p.shape[1], data));
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(Error::CorruptRecord(format!("{} trailing bytes in checkpoint", bytes.len() - off)));
    }
    store.set_step(header.step);
    Ok((store, header.meta))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>, meta: &serde_json::Value) -> Result<()> {
    write_atomic(path, &encode_checkpoint(store, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    decode_checkpoint(&std::fs::read(path)?)
}
