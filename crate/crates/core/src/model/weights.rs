//! `LPW1` named-tensor weight files.
//!
//! Layout (little-endian): magic `LPW1`, `u32` tensor count, then per tensor
//! `u32` name length, UTF-8 name, `u32` rank, `rank x u32` dims, raw `f32`s.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LPW1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::param(format!("tensor dims {dims:?} overflow")))?;
        if n != data.len() {
            return Err(Error::param(format!(
                "tensor dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }
}

/// Named tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    /// SHA-256 of the encoded file.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.encode().unwrap_or_default()).into()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(binio::to_u32(self.tensors.len(), "tensor count")?);
        for (name, t) in &self.tensors {
            w.u32(binio::to_u32(name.len(), "name length")?);
            w.bytes(name.as_bytes());
            w.u32(binio::to_u32(t.dims.len(), "rank")?);
            for &d in &t.dims {
                w.u32(binio::to_u32(d, "dimension")?);
            }
            w.f32s(&t.data);
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "LPW1");
        r.magic(MAGIC)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.bytes(len)?)
                .map_err(|_| Error::format("LPW1: tensor name is not UTF-8"))?
                .to_owned();
            let rank = r.u32()? as usize;
            if rank.saturating_mul(4) > r.remaining() {
                return Err(Error::format(format!(
                    "LPW1: rank {rank} exceeds file size"
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(format!("LPW1: dims {dims:?} overflow")))?;
            let data = r.f32s(n)?;
            if tensors
                .insert(name.clone(), Tensor { dims, data })
                .is_some()
            {
                return Err(Error::format(format!("LPW1: duplicate tensor '{name}'")));
            }
        }
        r.finish()?;
        Ok(Self { tensors })
    }
}

pub fn save_weights(weights: &Weights, path: &Path) -> Result<()> {
    binio::write_atomic(path, &weights.encode()?)
}

pub fn load_weights(path: &Path) -> Result<Weights> {
    Weights::decode(&binio::read_file(path)?)
}
