//! Little-endian binary containers: the checkpoint file (JSON metadata plus
//! named tensors) and the primitive readers/writers shared with the
//! embedding file.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRJSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn put_f32s(w: &mut impl Write, v: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    // grow as data arrives so a corrupt length cannot force a huge allocation
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("file is truncated".into()));
    }
    Ok(buf)
}

pub(crate) fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)? as usize;
    String::from_utf8(get_bytes(r, n)?).map_err(|_| Error::Format("string is not UTF-8".into()))
}

pub(crate) fn get_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let bytes = get_bytes(r, n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub(crate) fn check_magic(r: &mut impl Read, magic: &[u8], what: &str) -> Result<()> {
    let got = get_bytes(r, magic.len())?;
    if got != magic {
        return Err(Error::Format(format!("not a {what} file (bad magic)")));
    }
    Ok(())
}

/// Versioned checkpoint: a JSON metadata document plus named `f32` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(meta: &impl Serialize) -> Result<Self> {
        Ok(Checkpoint {
            meta: serde_json::to_value(meta)?,
            tensors: Vec::new(),
        })
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, prefix stripped, in file order.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        put_u32(w, CHECKPOINT_VERSION)?;
        let meta = serde_json::to_vec(&self.meta)?;
        put_u64(w, meta.len() as u64)?;
        w.write_all(&meta)?;
        put_u32(w, self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            put_str(w, name)?;
            put_u32(w, t.shape.len() as u32)?;
            for &d in &t.shape {
                put_u64(w, d as u64)?;
            }
            put_f32s(w, &t.data)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        check_magic(r, CHECKPOINT_MAGIC, "checkpoint")?;
        let version = get_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = get_u64(r)? as usize;
        let meta = serde_json::from_slice(&get_bytes(r, meta_len)?)?;
        let count = get_u32(r)? as usize;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = get_str(r)?;
            let rank = get_u32(r)? as usize;
            let shape = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor '{name}' is too large")))?;
            let data = get_f32s(r, n)?;
            tensors.push((name, Tensor { shape, data }));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path.as_ref())?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path.as_ref())?);
        Self::read_from(&mut r)
    }
}
