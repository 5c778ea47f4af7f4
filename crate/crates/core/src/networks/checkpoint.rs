//! Binary state container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CLACKPT\0"
//! version      u32      1
//! n_tensors    u32
//!   name_len u32, name (utf-8), rank u32, dims u64 × rank      (× n_tensors)
//! n_scalars    u32
//!   name_len u32, name (utf-8), value u64                      (× n_scalars)
//! payload      f64 × Σ numel, tensors in table order
//! crc32        u32      over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLACKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors and integer scalars; ordering is by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateDict {
    tensors: BTreeMap<String, Tensor>,
    scalars: BTreeMap<String, u64>,
}

impl StateDict {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn put_scalar(&mut self, name: impl Into<String>, v: u64) {
        self.scalars.insert(name.into(), v);
    }

    pub fn put_f64(&mut self, name: impl Into<String>, v: f64) {
        self.put_scalar(name, v.to_bits());
    }

    pub fn put_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        if !v.is_empty() {
            self.put_tensor(name, Tensor::vector(v));
        } else {
            self.put_scalar(format!("{}#empty", name.into()), 1);
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn scalar(&self, name: &str) -> Result<u64> {
        self.scalars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing scalar `{name}`")))
    }

    pub fn has_scalar(&self, name: &str) -> bool {
        self.scalars.contains_key(name)
    }

    pub fn f64(&self, name: &str) -> Result<f64> {
        self.scalar(name).map(f64::from_bits)
    }

    pub fn vec(&self, name: &str) -> Result<Vec<f64>> {
        if self.has_scalar(&format!("{name}#empty")) {
            return Ok(Vec::new());
        }
        Ok(self.tensor(name)?.data().to_vec())
    }

    /// Copies every entry of `other` under `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: StateDict) {
        for (k, v) in other.tensors {
            self.tensors.insert(format!("{prefix}.{k}"), v);
        }
        for (k, v) in other.scalars {
            self.scalars.insert(format!("{prefix}.{k}"), v);
        }
    }

    /// Entries under `prefix.`, with the prefix stripped.
    pub fn sub(&self, prefix: &str) -> StateDict {
        let p = format!("{prefix}.");
        StateDict {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
            scalars: self
                .scalars
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), *v)))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.scalars.len() as u32).to_le_bytes());
        for (name, v) in &self.scalars {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 4 {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n_tensors = r.u32()? as usize;
        let mut table = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            table.push((name, dims));
        }
        let n_scalars = r.u32()? as usize;
        let mut scalars = BTreeMap::new();
        for _ in 0..n_scalars {
            let name = r.string()?;
            scalars.insert(name, r.u64()?);
        }
        let mut tensors = BTreeMap::new();
        for (name, dims) in table {
            let n: usize = dims.iter().product();
            let data = (0..n)
                .map(|_| r.u64().map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))?;
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        Ok(Self { tensors, scalars })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity("checkpoint truncated".into()));
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("non-utf8 name".into()))
    }
}
