//! Binary checkpoint: the magic bytes `SMRT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then every
//! parameter as little-endian `f32` in canonical order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::param_shapes;
use super::{ModelConfig, ModelError};
use crate::autodiff::{ParamStore, Tensor};
use crate::io::SCHEMA_VERSION;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMRT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema: u32,
    pub config: ModelConfig,
    /// Content hash of each vocabulary file the model was trained with,
    /// keyed by vocabulary class.
    pub vocab_hashes: BTreeMap<String, String>,
    pub step: u64,
    pub params: Vec<ParamEntry>,
}

impl CheckpointHeader {
    pub fn new(config: ModelConfig, vocab_hashes: BTreeMap<String, String>, step: u64) -> Self {
        let params = param_shapes(&config).into_iter().map(|(name, rows, cols)| ParamEntry { name, rows, cols }).collect();
        CheckpointHeader { schema: SCHEMA_VERSION, config, vocab_hashes, step, params }
    }
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &ParamStore<f32>) -> Result<Vec<u8>, ModelError> {
    check_layout(header, params)?;
    let json = serde_json::to_vec(header).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * params.element_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<f32>), ModelError> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing SMRT magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.schema != SCHEMA_VERSION {
        return Err(corrupt(format!("unsupported header schema {}", header.schema)));
    }
    header.config.validate()?;
    let expected: Vec<ParamEntry> =
        param_shapes(&header.config).into_iter().map(|(name, rows, cols)| ParamEntry { name, rows, cols }).collect();
    if expected != header.params {
        return Err(corrupt("parameter list does not match the configuration"));
    }
    let mut data = &bytes[16 + hlen..];
    let total: usize = expected.iter().map(|e| e.rows * e.cols).sum();
    if data.len() != 4 * total {
        return Err(corrupt(format!("expected {} parameter bytes, found {}", 4 * total, data.len())));
    }
    let mut store = ParamStore::new();
    for e in &expected {
        let n = e.rows * e.cols;
        let vals = data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        data = &data[4 * n..];
        store.add(&e.name, Tensor::from_vec(e.rows, e.cols, vals))?;
    }
    Ok((header, store))
}

fn check_layout(header: &CheckpointHeader, params: &ParamStore<f32>) -> Result<(), ModelError> {
    let ok = header.params.len() == params.len()
        && header.params.iter().zip(params.iter()).all(|(e, (n, t))| e.name == n && (e.rows, e.cols) == t.shape());
    if ok {
        Ok(())
    } else {
        Err(corrupt("parameters do not match the header"))
    }
}

pub fn write_checkpoint(path: &Path, header: &CheckpointHeader, params: &ParamStore<f32>) -> Result<(), crate::Error> {
    let bytes = encode_checkpoint(header, params)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| crate::Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore<f32>), crate::Error> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}
