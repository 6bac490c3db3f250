//! Binary tensor archive.
//!
//! Little-endian layout: magic `GIBR`, `u32` version, `u32` tensor count, then
//! per tensor a `u32` name length, the UTF-8 name, a `u32` rank, `u64` dims
//! and the `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{DiffError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GIBR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        crate::tensor::check_len("checkpoint", shape, data.len())?;
        Ok(NamedTensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        })
    }
}

pub fn encode_checkpoint(w: &mut impl Write, tensors: &[NamedTensor]) -> Result<()> {
    let mut sorted: Vec<&NamedTensor> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    if let Some(pair) = sorted.windows(2).find(|p| p[0].name == p[1].name) {
        return Err(DiffError::Checkpoint(format!("duplicate tensor name {}", pair[0].name)));
    }
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(sorted.len() as u32).to_le_bytes())?;
    for t in sorted {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn decode_checkpoint(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DiffError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| DiffError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| DiffError::Checkpoint(format!("{name}: shape overflows")))?;
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

pub fn write_checkpoint(path: impl AsRef<Path>, tensors: &[NamedTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode_checkpoint(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    decode_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = NamedTensor::new("a", &[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_checkpoint(&mut buf, &[t.clone()]).unwrap();
        assert_eq!(&buf[..4], b"GIBR");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(buf[16], b'a');
        assert_eq!(&buf[17..21], &1u32.to_le_bytes());
        assert_eq!(&buf[21..29], &2u64.to_le_bytes());
        assert_eq!(buf.len(), 29 + 8);
        assert_eq!(decode_checkpoint(&mut buf.as_slice()).unwrap(), vec![t]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode_checkpoint(&mut &b"NOPE\x01\0\0\0\0\0\0\0"[..]).is_err());
        let t = NamedTensor::new("w", &[3], vec![1.0; 3]).unwrap();
        let mut buf = Vec::new();
        encode_checkpoint(&mut buf, &[t]).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(decode_checkpoint(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn duplicates_rejected() {
        let t = NamedTensor::new("w", &[1], vec![1.0]).unwrap();
        assert!(encode_checkpoint(&mut Vec::new(), &[t.clone(), t]).is_err());
    }
}
