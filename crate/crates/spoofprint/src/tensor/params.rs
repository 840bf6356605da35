//! Named parameter collections and the binary checkpoint format.
//!
//! Checkpoint layout: the magic bytes `SPL1`, then one record per tensor
//! (u32-LE name length, UTF-8 name, u32-LE rank, u32-LE dims, f64-LE data),
//! then a trailing CRC32 (IEEE) of every preceding byte. Records carry their
//! own lengths, so no count field is needed.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SPL1";

/// One named tensor in a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(Error::validation(
                "param_tensor",
                format!("{name}: shape {shape:?} wants {want} values, got {}", data.len()),
            ));
        }
        Ok(Self { name, shape, data })
    }
}

/// An ordered collection of named tensors: the full parameter vector of a
/// model, flattened on demand for the optimizers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: ParamTensor) -> Result<()> {
        if self.tensors.iter().any(|e| e.name == t.name) {
            return Err(Error::validation(
                "param_set",
                format!("duplicate tensor name {}", t.name),
            ));
        }
        self.tensors.push(t);
        Ok(())
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Total scalar count across all tensors.
    pub fn flat_len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Copies all tensors into one contiguous buffer, in declaration order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Writes a flat buffer produced by [`ParamSet::to_flat`] back in.
    pub fn from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::validation(
                "param_set",
                format!("flat buffer has {} values, want {}", flat.len(), self.flat_len()),
            ));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// FNV-1a hash of the raw parameter bits; used to assert that snapshots
    /// passed to adaptation loops are never mutated.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for t in &self.tensors {
            eat(t.name.as_bytes());
            for &d in &t.shape {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Serializes a [`ParamSet`] to the `SPL1` checkpoint format.
pub fn save_checkpoint(path: &Path, params: &ParamSet) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    for t in params.tensors() {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint, verifying the trailing CRC32 before decoding records.
pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 4 {
        return Err(Error::data(format!("{}: too short for a checkpoint", path.display())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::data(format!(
            "{}: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})",
            path.display()
        )));
    }
    if &body[..4] != MAGIC {
        return Err(Error::data(format!("{}: bad magic bytes", path.display())));
    }
    let mut off = 4usize;
    let mut params = ParamSet::new();
    let take = |off: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
        if *off + n > body.len() {
            return Err(Error::data("truncated checkpoint record".to_string()));
        }
        let r = *off..*off + n;
        *off += n;
        Ok(r)
    };
    while off < body.len() {
        let name_len = u32::from_le_bytes(body[take(&mut off, 4)?].try_into().unwrap()) as usize;
        let name = String::from_utf8(body[take(&mut off, name_len)?].to_vec())
            .map_err(|_| Error::data("checkpoint tensor name is not UTF-8"))?;
        let rank = u32::from_le_bytes(body[take(&mut off, 4)?].try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(body[take(&mut off, 4)?].try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        let range = take(&mut off, count * 8)?;
        for chunk in body[range].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        params.push(ParamTensor::new(name, shape, data)?)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.push(ParamTensor::new("w", vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-9, -7.25]).unwrap())
            .unwrap();
        p.push(ParamTensor::new("b", vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spl");
        let p = sample();
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.spl");
        save_checkpoint(&path, &sample()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("CRC"));
    }

    #[test]
    fn flat_round_trip() {
        let mut p = sample();
        let mut flat = p.to_flat();
        for v in flat.iter_mut() {
            *v += 1.0;
        }
        p.from_flat(&flat).unwrap();
        assert_eq!(p.get("b").unwrap().data, vec![1.1, 1.2, 1.3]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = sample();
        let err = p
            .push(ParamTensor::new("w", vec![1], vec![0.0]).unwrap())
            .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }
}
