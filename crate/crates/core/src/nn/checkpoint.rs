//! Denoiser checkpoint container.
//!
//! Layout: magic `VXCK`, `u32` version, `u64` header length, a UTF-8 JSON
//! header, the tensor payload as little-endian `f64` in header order, and a
//! trailing `u32` CRC32 over header and payload. All integers little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::unet::UNetConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameter tensors plus whatever state a trainer needs to resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    /// Optimizer steps taken.
    pub step: u64,
    /// Free-form metadata (schedules, normalization statistics).
    pub meta: serde_json::Value,
    /// Tensor groups, e.g. `params`, `adam.m`, `adam.v`.
    pub groups: BTreeMap<String, ParamStore>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: String,
    config: UNetConfig,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(config: UNetConfig, params: ParamStore) -> Self {
        let mut groups = BTreeMap::new();
        groups.insert("params".to_string(), params);
        Self {
            config,
            step: 0,
            meta: serde_json::Value::Null,
            groups,
        }
    }

    pub fn params(&self) -> Option<&ParamStore> {
        self.groups.get("params")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (group, store) in &self.groups {
            for (name, t) in store.iter() {
                tensors.push(TensorEntry {
                    group: group.clone(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            dtype: "f64le".into(),
            config: self.config.clone(),
            step: self.step,
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let mut h = crc32fast::Hasher::new();
        h.update(&header);
        h.update(&payload);
        out.extend_from_slice(&h.finalize().to_le_bytes());
        Ok(out)
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 {
            return Err(fail(format!("truncated: {} bytes", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..bytes.len() - 4];
        if hlen > body.len() {
            return Err(fail("header length exceeds file size".into()));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(fail(format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}")));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| fail(format!("header: {e}")))?;
        if header.dtype != "f64le" {
            return Err(fail(format!("unsupported dtype {}", header.dtype)));
        }
        let payload = &body[hlen..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(fail(format!("payload has {} bytes, header describes {}", payload.len(), total * 8)));
        }
        let mut groups: BTreeMap<String, ParamStore> = BTreeMap::new();
        let mut off = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[off..off + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += n * 8;
            let t = Tensor::new(e.shape, data).map_err(|err| fail(format!("tensor {}: {err}", e.name)))?;
            groups
                .entry(e.group)
                .or_default()
                .insert(e.name, t)
                .map_err(|err| fail(err.to_string()))?;
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            meta: header.meta,
            groups,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
