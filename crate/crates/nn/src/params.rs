//! Named parameter tensors and their binary checkpoint format.
//!
//! Layout (all integers little-endian `u32`):
//! `b"HGNN"`, version, tag, tensor count, then per tensor the name length,
//! UTF-8 name, four shape dims and the raw little-endian `f32` values.

use std::io::{self, Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HGNN";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a parameter checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Parameters of one network. The `tag` keys the store's leaves inside a
/// [`crate::Graph`]; networks sharing a graph must use distinct tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tag: u32,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(tag: u32) -> Self {
        Self {
            tag,
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn set_tag(&mut self, tag: u32) {
        self.tag = tag;
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    /// Adds a tensor with i.i.d. `N(0, std^2)` entries.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        std: f32,
        rng: &mut R,
    ) -> usize {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        let data = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(rng))
            .collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn get(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        for v in [VERSION, self.tag, self.tensors.len() as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for (name, t) in self.names.iter().zip(&self.tensors) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            for d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let tag = read_u32(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new(tag);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(CheckpointError::Corrupt(format!("name length {name_len}")));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            let mut shape = [0usize; 4];
            for d in shape.iter_mut() {
                *d = read_u32(&mut r)? as usize;
            }
            let len: usize = shape.iter().product();
            let mut buf = vec![0u8; len * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            store.add(name, Tensor::from_vec(shape, data));
        }
        Ok(store)
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
