//! Versioned binary container for dataset shards and model checkpoints.
//!
//! Byte layout (all integers little-endian, all floats f64 little-endian):
//!
//! ```text
//! magic    8 bytes  "FPDTBIN\0"
//! version  u32
//! kind     u32      1 = dataset shard, 2 = checkpoint
//! meta_len u64      followed by meta_len bytes of JSON metadata
//! n_arrays u64
//! per array:
//!   name_len u64, name bytes (UTF-8)
//!   ndim u64, dims (u64 each)
//!   data (f64 x product(dims))
//! checksum 32 bytes sha256 over everything above
//! ```
//!
//! The layout is stable across runs: identical inputs produce bit-identical
//! files, so file hashes can serve as dataset/checkpoint fingerprints.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FPDTBIN\0";
pub const VERSION: u32 = 1;

pub const KIND_SHARD: u32 = 1;
pub const KIND_CHECKPOINT: u32 = 2;

/// A named f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        let a = Self { name: name.into(), dims, data };
        debug_assert_eq!(a.dims.iter().product::<usize>(), a.data.len());
        a
    }
}

/// Serialize metadata and arrays into the container byte layout.
pub fn to_bytes<M: Serialize>(kind: u32, meta: &M, arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let meta_bytes = serde_json::to_vec(meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&kind.to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for a in arrays {
        if a.dims.iter().product::<usize>() != a.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "array {}: dims {:?} do not match {} values",
                a.name,
                a.dims,
                a.data.len()
            )));
        }
        buf.extend_from_slice(&(a.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(a.name.as_bytes());
        buf.extend_from_slice(&(a.dims.len() as u64).to_le_bytes());
        for &d in &a.dims {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &a.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn write_file<M: Serialize>(
    path: &Path,
    kind: u32,
    meta: &M,
    arrays: &[NamedArray],
) -> Result<()> {
    let bytes = to_bytes(kind, meta, arrays)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corrupt("unexpected end of container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse container bytes, verifying magic, version, kind, and checksum.
pub fn from_bytes<M: DeserializeOwned>(
    bytes: &[u8],
    expected_kind: u32,
) -> Result<(M, Vec<NamedArray>)> {
    if bytes.len() < MAGIC.len() + 4 + 4 + 32 {
        return Err(Error::Corrupt("container too short".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(Error::ChecksumMismatch(format!(
            "expected {}, computed {}",
            hex::encode(checksum),
            hex::encode(digest)
        )));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    let kind = c.u32()?;
    if kind != expected_kind {
        return Err(Error::Corrupt(format!("container kind {kind}, expected {expected_kind}")));
    }
    let meta_len = c.u64()? as usize;
    let meta: M = serde_json::from_slice(c.take(meta_len)?)?;
    let n_arrays = c.u64()? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name_len = c.u64()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Corrupt("array name is not UTF-8".into()))?;
        let ndim = c.u64()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = c.take(8 * count)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().unwrap()))
            .collect();
        arrays.push(NamedArray { name, dims, data });
    }
    if c.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes in container".into()));
    }
    Ok((meta, arrays))
}

pub fn read_file<M: DeserializeOwned>(
    path: &Path,
    expected_kind: u32,
) -> Result<(M, Vec<NamedArray>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes, expected_kind)
}

/// Hex sha256 of an arbitrary file (used for manifests and determinism
/// checks).
pub fn sha256_hex_of_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
