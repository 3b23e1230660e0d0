//! Parameter checkpoints.
//!
//! Layout, byte for byte:
//!
//! 1. a compact JSON manifest on one line, terminated by `\n`;
//! 2. the payload: every tensor's values as little-endian IEEE-754 binary64, in
//!    manifest order, at the byte offsets the manifest records (relative to the
//!    payload start);
//! 3. a 4-byte little-endian CRC-32 (IEEE) of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Shape, Tensor};
use crate::error::{CheckpointError, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "dendrite-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    /// Byte offset from the start of the payload.
    pub offset: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Free-form description of the model the parameters belong to.
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

/// Serializes `params` (in name order) with the given metadata.
pub fn to_bytes<S: Scalar>(params: &ParamStore<S>, meta: &BTreeMap<String, String>) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::new();
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_array(),
            offset: payload.len(),
            count: t.numel(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.f64().to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors,
        payload_bytes: payload.len(),
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn from_bytes<S: Scalar>(
    bytes: &[u8],
) -> Result<(ParamStore<S>, BTreeMap<String, String>), CheckpointError> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CheckpointError::Malformed("no manifest terminator".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| CheckpointError::Malformed(format!("manifest: {e}")))?;
    if manifest.format != FORMAT_TAG {
        return Err(CheckpointError::Malformed(format!(
            "unknown format tag `{}`",
            manifest.format
        )));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: manifest.version,
            expected: FORMAT_VERSION,
        });
    }
    let payload_start = newline + 1;
    let expected = payload_start + manifest.payload_bytes + 4;
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected
        )));
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let payload = &body[payload_start..];
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let shape = Shape::from_array(e.shape);
        let end = e.offset + e.count * 8;
        if shape.numel() != e.count || end > payload.len() {
            return Err(CheckpointError::Malformed(format!(
                "entry `{}` out of range",
                e.name
            )));
        }
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|c| S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        store
            .insert(e.name.clone(), t)
            .map_err(|_| CheckpointError::Malformed(format!("duplicate entry `{}`", e.name)))?;
    }
    Ok((store, manifest.meta))
}

pub fn save_checkpoint<S: Scalar>(
    params: &ParamStore<S>,
    meta: &BTreeMap<String, String>,
    path: &Path,
) -> Result<()> {
    std::fs::write(path, to_bytes(params, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(ParamStore<S>, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(from_bytes(&bytes)?)
}

/// Replaces the values of `target` with those from `loaded`, requiring the same names and shapes.
pub fn restore_into<S: Scalar>(target: &mut ParamStore<S>, loaded: &ParamStore<S>) -> Result<()> {
    if let Some(extra) = loaded.names().find(|n| !target.contains(n)) {
        return Err(CheckpointError::UnknownName(extra.to_string()).into());
    }
    if let Some(missing) = target.names().find(|n| !loaded.contains(n)) {
        return Err(CheckpointError::MissingName(missing.to_string()).into());
    }
    for (name, t) in loaded.iter() {
        let dst = target.get_mut(name).expect("checked");
        if dst.shape() != t.shape() {
            return Err(CheckpointError::Malformed(format!(
                "`{name}` has shape {} in checkpoint, model expects {}",
                t.shape(),
                dst.shape()
            ))
            .into());
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
