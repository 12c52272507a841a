//! Versioned binary parameter checkpoints: a flat `name -> tensor` map.
//! Values are raw little-endian f64 bits, so round-trips are bit-exact,
//! including negative zero and subnormals.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::Tensor;

const MAGIC: &[u8; 4] = b"SDCP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint_bytes(entries: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (key, tensor) in entries {
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Cursor { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            &magic[..],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let key_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let key = String::from_utf8(r.take(key_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("non-utf8 key: {e}")))?;
        let ndim = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        entries.insert(key, Tensor::new(&shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after {count} entries",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn write_checkpoint(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&write_checkpoint_bytes(entries))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint_bytes(&bytes)
}
