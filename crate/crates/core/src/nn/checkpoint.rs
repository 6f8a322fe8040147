//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `MGAILCK\0`, a little-endian `u32` header
//! length, a JSON header, then the concatenated little-endian tensor
//! payloads. The header carries the format version, the element type, every
//! store's entries (name, shape, offset) and free-form metadata such as the
//! network configuration.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MGAILCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EntryHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: Dtype,
    stores: IndexMap<String, Vec<EntryHeader>>,
    metadata: serde_json::Value,
}

/// Several named parameter stores plus metadata, saved as one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub stores: IndexMap<String, ParameterStore>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            stores: IndexMap::new(),
            metadata,
        }
    }

    pub fn with_store(mut self, name: impl Into<String>, store: ParameterStore) -> Self {
        self.stores.insert(name.into(), store);
        self
    }

    pub fn store(&self, name: &str) -> Result<&ParameterStore> {
        self.stores
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no store `{name}`")))
    }

    /// 32-bit payload when every value is exactly representable, else 64-bit.
    pub fn dtype(&self) -> Dtype {
        if self.stores.values().all(ParameterStore::is_f32_exact) {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dtype = self.dtype();
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let mut payload = Vec::new();
        let mut stores = IndexMap::new();
        for (sname, store) in &self.stores {
            let mut entries = Vec::with_capacity(store.len());
            for (name, t) in store.iter() {
                entries.push(EntryHeader {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                });
                payload.reserve(t.len() * width);
                for &v in t.data() {
                    match dtype {
                        Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                        Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
            stores.insert(sname.clone(), entries);
        }
        let header = serde_json::to_vec(&Header {
            format_version: CHECKPOINT_VERSION,
            dtype,
            stores,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12 + hlen;
        if bytes.len() < header_end {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                header.format_version
            )));
        }
        let payload = &bytes[header_end..];
        let width = match header.dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let mut stores = IndexMap::new();
        for (sname, entries) in header.stores {
            let mut store = ParameterStore::new();
            for e in entries {
                let n: usize = e.shape.iter().product();
                let end = e.offset + n * width;
                if end > payload.len() {
                    return Err(Error::Format(format!("tensor `{}` runs past end of file", e.name)));
                }
                let raw = &payload[e.offset..end];
                let data = match header.dtype {
                    Dtype::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect(),
                    Dtype::F64 => raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                };
                store.insert(e.name, Tensor::new(e.shape, data)?)?;
            }
            stores.insert(sname, store);
        }
        Ok(Self {
            stores,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"hello world, not a checkpoint").is_err());
    }

    #[test]
    fn picks_f64_payload_for_values_off_the_f32_grid() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(0.1)).unwrap();
        let ck = Checkpoint::new(serde_json::json!({})).with_store("net", s.clone());
        assert_eq!(ck.dtype(), Dtype::F64);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.store("net").unwrap(), &s);
        s.quantize_f32();
        let ck = Checkpoint::new(serde_json::json!({})).with_store("net", s);
        assert_eq!(ck.dtype(), Dtype::F32);
    }
}
