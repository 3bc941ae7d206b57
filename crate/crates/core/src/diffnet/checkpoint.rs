//! Binary container for named tensors plus string metadata.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SSCKPT01"
//! count      u32      number of tensors
//! tensor*    u32 name length, UTF-8 name, u32 ndim, u64 × ndim dims,
//!            f64 × prod(dims) values
//! meta count u32
//! meta*      u32 key length, UTF-8 key, u64 value length, UTF-8 value
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SSCKPT01";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u64).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out
    }

    /// Parses a container; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::malformed(path, 0, "bad magic"));
        }
        let mut params = ParamStore::new();
        let count = r.u32()?;
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = r.string(len)?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let (rows, cols) = match dims[..] {
                [n] => (1, n),
                [a, b] => (a, b),
                _ => return Err(Error::malformed(path, at as u64, format!("tensor {name} has {ndim} dims"))),
            };
            let n = rows
                .checked_mul(cols)
                .filter(|n| n * 8 <= bytes.len())
                .ok_or_else(|| Error::malformed(path, at as u64, "tensor too large"))?;
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params
                .add(name, Tensor::from_vec(rows, cols, data)?)
                .map_err(|e| Error::malformed(path, at as u64, e.to_string()))?;
        }
        let mut meta = BTreeMap::new();
        let count = r.u32()?;
        for _ in 0..count {
            let klen = r.u32()? as usize;
            let k = r.string(klen)?;
            let vlen = r.u64()? as usize;
            let v = r.string(vlen)?;
            meta.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::malformed(path, r.pos as u64, "trailing bytes"));
        }
        Ok(Self { params, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::malformed(self.path, self.pos as u64, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::malformed(self.path, at as u64, "invalid UTF-8"))
    }
}
