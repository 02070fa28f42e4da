//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "SPCK"
//! version    u32      currently 1
//! precision  u8       bytes per value: 8 (f64) or 4 (f32)
//! meta_len   u32      followed by meta_len bytes of UTF-8 metadata
//! count      u32      number of tensors
//! tensor*    name_len u32, name (UTF-8), rank u32, dims u64 * rank,
//!            then product(dims) values, row-major
//! ```
//!
//! Tensors are stored in name order. Trailing bytes are rejected.

use std::collections::BTreeMap;

use crate::{AutodiffError, NArray, Result};

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub precision: Precision,
    /// Free-form UTF-8 payload, typically JSON describing the model and run.
    pub metadata: String,
    pub tensors: BTreeMap<String, NArray>,
}

impl Checkpoint {
    pub fn new(metadata: String) -> Self {
        Self {
            precision: Precision::F64,
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.precision.width() as u8);
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                match self.precision {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(AutodiffError::Checkpoint {
                offset: 4,
                reason: format!("unsupported format version {version}"),
            });
        }
        let precision = match r.take(1)?[0] {
            8 => Precision::F64,
            4 => Precision::F32,
            other => {
                return Err(AutodiffError::Checkpoint {
                    offset: 8,
                    reason: format!("unknown precision width {other}"),
                })
            }
        };
        let meta_len = r.u32()? as usize;
        let metadata = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| corrupt(r.pos, "metadata is not UTF-8"))?
            .to_string();
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt(r.pos, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > MAX_RANK {
                return Err(corrupt(r.pos, "tensor rank too large"));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut len: usize = 1;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| corrupt(r.pos, "dimension overflow"))?;
                len = len
                    .checked_mul(d)
                    .ok_or_else(|| corrupt(r.pos, "tensor size overflow"))?;
                shape.push(d);
            }
            let payload = len
                .checked_mul(precision.width())
                .ok_or_else(|| corrupt(r.pos, "tensor size overflow"))?;
            let raw = r.take(payload)?;
            let data: Vec<f64> = match precision {
                Precision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Precision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            if tensors.contains_key(&name) {
                return Err(AutodiffError::Checkpoint {
                    offset: r.pos,
                    reason: format!("duplicate tensor {name:?}"),
                });
            }
            tensors.insert(name, NArray::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(corrupt(r.pos, "trailing bytes"));
        }
        Ok(Self {
            precision,
            metadata,
            tensors,
        })
    }
}

fn corrupt(offset: usize, reason: &str) -> AutodiffError {
    AutodiffError::Checkpoint {
        offset,
        reason: reason.to_string(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| corrupt(self.pos, "unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
