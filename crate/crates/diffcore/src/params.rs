//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! u64  header_len
//! [u8; header_len]  JSON index: { "meta": {...}, "arrays": [{name, shape, offset, len}] }
//! repeated per array:
//!     u64  element count
//!     [f32; count]
//! ```
//!
//! `offset` is the absolute byte position of an array's first `f32`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat collection of named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a `fan_in × fan_out` weight drawn from N(0, gain / fan_in).
    pub fn add_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let std = (gain / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Serializes every parameter, rounded to `f32`, plus a JSON `meta` blob.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W, meta: &serde_json::Value) -> Result<()> {
        let mut entries = Vec::with_capacity(self.len());
        // header length is not known until the header is rendered, so offsets are
        // first computed relative to the data section
        let mut rel = 0u64;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            rel += 8;
            entries.push(IndexEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: rel,
                len: t.len() as u64,
            });
            rel += 4 * t.len() as u64;
        }
        let mut header = CheckpointHeader { meta: meta.clone(), arrays: entries };
        // offsets widen the header, so iterate until the rendered length is stable
        let mut base = 0u64;
        let bytes = loop {
            let shifted = CheckpointHeader {
                meta: header.meta.clone(),
                arrays: header
                    .arrays
                    .iter()
                    .map(|e| IndexEntry { offset: e.offset + base, ..e.clone() })
                    .collect(),
            };
            let bytes = serde_json::to_vec(&shifted).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
            let needed = 8 + bytes.len() as u64;
            if needed == base {
                header = shifted;
                break bytes;
            }
            base = needed;
        };
        debug_assert_eq!(header.arrays.first().map_or(base + 8, |e| e.offset), base + 8);
        out.write_all(&(bytes.len() as u64).to_le_bytes())?;
        out.write_all(&bytes)?;
        for t in &self.tensors {
            out.write_all(&(t.len() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(4 * t.len());
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf, meta)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a checkpoint, returning the parameters (in file order) and `meta`.
    pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<(Self, serde_json::Value)> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let bad = |msg: &str| DiffError::Checkpoint(msg.to_string());
        if bytes.len() < 8 {
            return Err(bad("file shorter than the header length prefix"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("header length exceeds file size"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| DiffError::Checkpoint(format!("bad JSON index: {e}")))?;
        let mut store = ParamStore::new();
        for entry in &header.arrays {
            let start = entry.offset as usize;
            if start < header_end + 8 {
                return Err(bad("array offset points into the header"));
            }
            let count = u64::from_le_bytes(bytes[start - 8..start].try_into().unwrap());
            if count != entry.len {
                return Err(DiffError::Checkpoint(format!(
                    "array {} length prefix {} disagrees with index {}",
                    entry.name, count, entry.len
                )));
            }
            let end = start + 4 * entry.len as usize;
            if end > bytes.len() {
                return Err(DiffError::Checkpoint(format!("array {} truncated", entry.name)));
            }
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        }
        Ok((store, header.meta))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut f = std::fs::File::open(path)?;
        Self::read_checkpoint(&mut f)
    }

    /// Copies values for every parameter of `self` from a store with the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor> =
            other.names.iter().map(String::as_str).zip(&other.tensors).collect();
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| DiffError::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(DiffError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = (*src).clone();
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    meta: serde_json::Value,
    arrays: Vec<IndexEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_rounds_to_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_weight("a.w", 4, 3, 2.0, &mut rng);
        store.add("a.b", Tensor::matrix(1, 3, vec![0.1, -0.2, 1e-9]));
        let meta = serde_json::json!({"layers": 2});
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf, &meta).unwrap();
        let (back, meta_back) = ParamStore::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(meta, meta_back);
        assert_eq!(back.len(), 2);
        for id in store.ids() {
            assert_eq!(back.name(id), store.name(id));
            assert_eq!(back.get(id).shape(), store.get(id).shape());
            for (x, y) in back.get(id).data().iter().zip(store.get(id).data()) {
                assert_eq!(*x, (*y as f32) as f64);
            }
        }
    }

    #[test]
    fn checkpoint_offsets_point_at_values() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::matrix(1, 2, vec![1.5, -2.0]));
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf, &serde_json::json!({})).unwrap();
        let header_len = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(&buf[8..8 + header_len]).unwrap();
        let off = header.arrays[0].offset as usize;
        assert_eq!(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()), 1.5);
        assert_eq!(u64::from_le_bytes(buf[off - 8..off].try_into().unwrap()), 2);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::matrix(2, 2, vec![1.0; 4]));
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf, &serde_json::json!(null)).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::read_checkpoint(&mut buf.as_slice()).is_err());
        assert!(ParamStore::read_checkpoint(&mut [1u8, 2].as_slice()).is_err());
    }
}
