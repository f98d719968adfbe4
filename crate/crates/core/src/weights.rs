//! Flat binary weight files.
//!
//! A file is a sequence of records with no global header. Each record is
//!
//! ```text
//! u64 name_len | name (UTF-8) | u64 rank | rank × u64 extent | Π extents × f64
//! ```
//!
//! with every integer and float little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

/// Ordered list of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    entries: Vec<(String, Tensor)>,
}

impl NamedTensors {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::WeightFormat(format!("missing record {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let mut out = Self::default();
        while cur.pos < bytes.len() {
            let name_len = cur.len_field("name length")?;
            let name = std::str::from_utf8(cur.take(name_len, "name")?)
                .map_err(|_| Error::WeightFormat(format!("record name at byte {} is not UTF-8", cur.pos)))?
                .to_string();
            let rank = cur.len_field("rank")?;
            if rank == 0 {
                return Err(Error::WeightFormat(format!("record {name:?} has rank 0")));
            }
            let shape = (0..rank)
                .map(|_| cur.len_field("extent"))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .ok_or_else(|| Error::WeightFormat(format!("record {name:?} is too large")))?;
            let raw = cur.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::WeightFormat("value block overflows".into()))?,
                "values",
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::from_vec(&shape, data)
                .map_err(|e| Error::WeightFormat(format!("record {name:?}: {e}")))?;
            out.push(name, t);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::WeightFormat(format!("truncated {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len_field(&mut self, what: &str) -> Result<usize> {
        let raw = self.take(8, what)?;
        let v = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::WeightFormat(format!("{what} {v} does not fit in memory")))
    }
}
