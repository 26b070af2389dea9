//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "BPCKPT\0\0"
//! version    u32       container schema version (1)
//! meta_len   u32       length of the metadata document
//! meta       bytes     UTF-8 JSON metadata (dimensions, seed, config hash)
//! count      u32       number of tensors
//! repeated count times:
//!   name_len u32, name bytes (UTF-8)
//!   ndim     u32, ndim × u64 extents
//!   payload  product(extents) × f64 (IEEE-754 little-endian)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BPCKPT\0\0";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub component: String,
    pub hidden_dim: usize,
    pub modes: usize,
    pub future_steps: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(meta: CheckpointMeta, store: &ParameterStore) -> Self {
        let tensors = store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Checkpoint { meta, tensors }
    }

    /// Loads every stored tensor into `store`; names and shapes must match
    /// the store's layout exactly.
    pub fn apply_to(&self, store: &mut ParameterStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Config(format!(
                "checkpoint `{}` holds {} tensors, model expects {}",
                self.meta.component,
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            store.set(name, t.clone())?;
        }
        Ok(())
    }

    /// Collects several stores into one checkpoint; their names must not clash.
    pub fn from_stores(meta: CheckpointMeta, stores: &[&ParameterStore]) -> Self {
        let tensors = stores.iter().flat_map(|s| s.iter().map(|(n, t)| (n.to_string(), t.clone()))).collect();
        Checkpoint { meta, tensors }
    }

    /// Fills every store by name; together the stores must account for every
    /// stored tensor.
    pub fn apply_to_stores(&self, stores: &mut [&mut ParameterStore]) -> Result<()> {
        let expected: usize = stores.iter().map(|s| s.len()).sum();
        if expected != self.tensors.len() {
            return Err(Error::Config(format!(
                "checkpoint `{}` holds {} tensors, model expects {expected}",
                self.meta.component,
                self.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            let store = stores
                .iter_mut()
                .find(|s| s.find(name).is_some())
                .ok_or_else(|| Error::Config(format!("checkpoint tensor `{name}` is unknown to the model")))?;
            store.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
