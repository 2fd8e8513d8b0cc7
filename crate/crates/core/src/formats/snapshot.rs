//! Model snapshot container: named `f32` tensors.
//!
//! Layout (little-endian): `b"EEGM"`, version `u16`, tensor count `u32`,
//! then per tensor a `u16` name length, UTF-8 name, `u8` rank, `u32` dims
//! and the `f32` values in row-major order.

use std::path::Path;

use super::Reader;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EEGM";
pub const VERSION: u16 = 1;
const MAX_VALUES: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Snapshot {
    pub tensors: Vec<NamedTensor>,
}

impl Snapshot {
    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: impl IntoIterator<Item = f64>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            dims: dims.to_vec(),
            data: data.into_iter().map(|v| v as f32).collect(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "model snapshot");
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::malformed("model snapshot", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::malformed("model snapshot", "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = r.u32()? as usize;
                n = n.saturating_mul(d);
                dims.push(d);
            }
            if n > MAX_VALUES {
                return Err(Error::malformed("model snapshot", format!("tensor {name} too large")));
            }
            let data = r.f32s(n)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::malformed("model snapshot", format!("tensor {name} has non-finite values")));
            }
            tensors.push(NamedTensor { name, dims, data });
        }
        r.finish()?;
        Ok(Snapshot { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
