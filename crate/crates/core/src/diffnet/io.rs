//! Weights container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "WCPARAMS"
//! version u8       1
//! count   u32
//! count × record:
//!   name_len u32, name (UTF-8), ndim u32, dims ndim × u64, data Π(dims) × f64
//! ```

use std::fs;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"WCPARAMS";
const VERSION: u8 = 1;

pub fn params_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_values() * 8);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::UnsupportedFormat("truncated weights file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn params_from_bytes(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != WEIGHTS_MAGIC {
        return Err(Error::UnsupportedFormat("bad weights magic".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::UnsupportedFormat(format!("weights version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::UnsupportedFormat("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::UnsupportedFormat(format!("rank {ndim} tensor")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut n: usize = 1;
        for _ in 0..ndim {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::UnsupportedFormat("dimension overflow".into()))?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::UnsupportedFormat("dimension overflow".into()))?;
            shape.push(d);
        }
        let bytes = r.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::UnsupportedFormat("dimension overflow".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| Error::UnsupportedFormat(e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(Error::UnsupportedFormat("trailing bytes after weights".into()));
    }
    Ok(store)
}

/// Writes the store atomically (temporary file, then rename).
pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, params_to_bytes(store)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    params_from_bytes(&buf)
}
