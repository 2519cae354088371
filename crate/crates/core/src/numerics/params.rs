//! Named parameter storage and the checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! offset 0    8 bytes   magic "DFCKPT01"
//! offset 8    u64       header length L in bytes
//! offset 16   L bytes   UTF-8 JSON header
//! offset 16+L           payload: raw f64 values, little-endian
//! ```
//!
//! The header is `{"metadata": {...}, "tensors": [{"name", "shape", "offset"}]}`
//! where `offset` is the byte offset of the tensor inside the payload. Tensors
//! are stored in name order, contiguously.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DFCKPT01";

/// First and second moment estimates of one parameter.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub m: Tensor,
    pub v: Tensor,
}

/// Trainable parameters by path plus AdamW state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, MomentState>,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Replaces the value of an existing parameter, resetting its moments.
    pub fn replace(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) => {
                *slot = value;
                self.moments.remove(name);
                Ok(())
            }
            None => Err(Error::invalid(format!("unknown parameter '{name}'"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn moments_mut(&mut self, name: &str) -> &mut MomentState {
        let shape = self.params[name].shape().to_vec();
        self.moments
            .entry(name.to_string())
            .or_insert_with(|| MomentState {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
            })
    }

    pub(crate) fn advance_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    /// Parameters only; optimizer state starts fresh.
    pub fn clone_params(&self) -> Self {
        Self {
            params: self.params.clone(),
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn to_bytes(&self, metadata: &serde_json::Map<String, serde_json::Value>) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.numel() as u64;
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            metadata: metadata.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Map<String, serde_json::Value>)> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut store = ParamStore::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > payload.len() {
                return Err(Error::Checkpoint(format!("tensor '{}' past end of payload", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.insert(&e.name, Tensor::new(e.shape, data)?)?;
        }
        Ok((store, header.metadata))
    }

    pub fn save(&self, path: &Path, metadata: &serde_json::Map<String, serde_json::Value>) -> Result<()> {
        let bytes = self.to_bytes(metadata)?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Map<String, serde_json::Value>)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::format(path, m),
            other => other,
        })
    }
}
