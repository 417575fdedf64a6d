//! Binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "XMRW"            magic
//! u32               version (1)
//! u32               tensor count
//! per tensor:
//!   u16             name length
//!   [u8]            UTF-8 name
//!   u8              rank
//!   u32 × rank      dims
//!   f32 × Π dims    row-major payload
//! u32               CRC32 (IEEE) of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XMRW";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::WeightShapeMismatch(format!(
                "dims {dims:?} need {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightFile {
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightFile {
    pub fn insert(&mut self, name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<()> {
        self.tensors.insert(name.into(), Tensor::new(dims, data)?);
        Ok(())
    }

    /// Tensor `name` with exactly `dims`.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::WeightShapeMismatch(format!("missing tensor `{name}`")))?;
        if t.dims != dims {
            return Err(Error::WeightShapeMismatch(format!(
                "`{name}` has dims {:?}, expected {dims:?}",
                t.dims
            )));
        }
        Ok(t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m);
        if bytes.len() < 16 {
            return Err(bad("file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC32 checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated"))? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = r.u32().ok_or_else(|| bad("truncated"))?;
        let mut wf = WeightFile::default();
        for _ in 0..count {
            let nlen = r.u16().ok_or_else(|| bad("truncated"))? as usize;
            let name = std::str::from_utf8(r.take(nlen).ok_or_else(|| bad("truncated"))?)
                .map_err(|_| bad("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1).ok_or_else(|| bad("truncated"))?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32().ok_or_else(|| bad("truncated"))? as usize);
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4).ok_or_else(|| bad("truncated payload"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            wf.tensors.insert(name, Tensor { dims, data });
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes before checksum"));
        }
        Ok(wf)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.encode())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}
