//! Versioned binary container shared by checkpoints, surrogates, datasets,
//! and score dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   ("KVZL" model, "KVZP" surrogate, "KVZD" dataset, "KVZS" scores)
//! version    u32       (currently 1)
//! meta_len   u64
//! meta       meta_len bytes of canonical JSON (UTF-8)
//! n_tensors  u32
//! per tensor:
//!   name_len u16, name bytes
//!   rank     u32, dims u64 × rank
//!   payload  f32 × prod(dims)
//! ```
//!
//! Tensors are written in a fixed, documented order per container kind, so a
//! save → load → save round trip is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const VERSION: u32 = 1;

pub const MAGIC_MODEL: [u8; 4] = *b"KVZL";
pub const MAGIC_SURROGATE: [u8; 4] = *b"KVZP";
pub const MAGIC_DATASET: [u8; 4] = *b"KVZD";
pub const MAGIC_SCORES: [u8; 4] = *b"KVZS";

/// In-memory form of a container file.
#[derive(Debug, Clone)]
pub struct Container {
    pub magic: [u8; 4],
    pub meta_json: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(magic: [u8; 4], meta_json: String) -> Self {
        Self {
            magic,
            meta_json,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, tensor: Tensor<f32>) {
        self.tensors.push((name.to_string(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Validation(format!("missing tensor '{name}' in container")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.magic)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = self.meta_json.as_bytes();
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            if nb.len() > u16::MAX as usize {
                return Err(Error::Format(format!("tensor name too long: {name}")));
            }
            w.write_all(&(nb.len() as u16).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Load and validate a container, checking the expected magic tag.
    pub fn load(path: &Path, expected_magic: [u8; 4]) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for magic".into()))?;
        if magic != expected_magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(&expected_magic),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}"
            )));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)
            .map_err(|_| Error::Format("truncated metadata block".into()))?;
        let meta_json = String::from_utf8(meta)
            .map_err(|_| Error::Format("metadata is not valid UTF-8".into()))?;
        let n_tensors = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = read_u16(&mut r)? as usize;
            let mut nb = vec![0u8; name_len];
            r.read_exact(&mut nb)
                .map_err(|_| Error::Format("truncated tensor name".into()))?;
            let name = String::from_utf8(nb)
                .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format(format!("truncated payload for tensor '{name}'")))?;
                data.push(f32::from_le_bytes(buf));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            magic,
            meta_json,
            tensors,
        })
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format("truncated header".into()))?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.bin");
        let p2 = dir.path().join("b.bin");
        let mut c = Container::new(MAGIC_MODEL, "{\"x\":1}".to_string());
        c.push("w", Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        c.save(&p1).unwrap();
        let loaded = Container::load(&p1, MAGIC_MODEL).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let c = Container::new(MAGIC_MODEL, "{}".to_string());
        c.save(&p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            Container::load(&p, MAGIC_MODEL),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn wrong_magic_kind_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        Container::new(MAGIC_DATASET, "{}".to_string()).save(&p).unwrap();
        assert!(Container::load(&p, MAGIC_MODEL).is_err());
    }
}
