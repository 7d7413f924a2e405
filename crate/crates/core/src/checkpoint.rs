//! Binary weight container: magic, little-endian header length, JSON
//! header (version, metadata, tensor names and shapes, payload hash), then
//! every tensor as raw little-endian f64 in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HMRCKPT\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: BTreeMap<String, String>,
    entries: Vec<Entry>,
    payload_sha256: String,
}

/// Named tensors plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: ParamStore,
}

impl Checkpoint {
    pub fn new(tensors: ParamStore) -> Self {
        Checkpoint { meta: BTreeMap::new(), tensors }
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    /// Serialize; refuses non-finite weights.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some((name, _)) = self.tensors.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numeric(format!("checkpoint tensor '{name}'")));
        }
        let mut payload = Vec::with_capacity(self.tensors.num_scalars() * 8);
        for (_, t) in self.tensors.iter() {
            t.data().iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes()));
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            meta: self.meta.clone(),
            entries: self.tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("not a checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(header)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let payload = &bytes[16 + hlen..];
        let expected: usize = header.entries.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
        if payload.len() != expected {
            return Err(Error::Format(format!("checkpoint payload is {} bytes, expected {expected}", payload.len())));
        }
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(fmt("checkpoint checksum mismatch"));
        }
        let mut tensors = ParamStore::new();
        let mut pos = 0;
        for e in header.entries {
            let n: usize = e.shape.iter().product();
            let data: Vec<f64> = payload[pos..pos + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += n * 8;
            if tensors.contains(&e.name) {
                return Err(Error::Format(format!("duplicate tensor '{}'", e.name)));
            }
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(Checkpoint { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Weights in the layout of `expected`; every missing, extra, or
    /// reshaped tensor is named in the error.
    pub fn params_like(&self, expected: &ParamStore) -> Result<ParamStore> {
        let mut problems = Vec::new();
        for (name, t) in expected.iter() {
            match self.tensors.get(name) {
                Err(_) => problems.push(format!("missing '{name}'")),
                Ok(have) if have.shape() != t.shape() => {
                    problems.push(format!("'{name}' has shape {:?}, expected {:?}", have.shape(), t.shape()))
                }
                Ok(_) => {}
            }
        }
        for (name, _) in self.tensors.iter() {
            if !expected.contains(name) {
                problems.push(format!("unexpected '{name}'"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Format(format!("checkpoint does not match model: {}", problems.join("; "))));
        }
        Ok(self.tensors.clone())
    }
}
