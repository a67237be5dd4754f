//! Versioned binary tensor container shared by backbone and head checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "FSNSCKPT"
//! version    u32      1
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON
//! count      u32      number of tensors
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims (u64 each)
//!   data     prod(dims) x f32
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Mat, Params, Real};

pub const MAGIC: &[u8; 8] = b"FSNSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let expect: usize = t.shape.iter().product();
            if expect != t.data.len() {
                return Err(Error::Checkpoint(format!("tensor `{}` has inconsistent shape", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u64()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Container { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hash_bytes(&bytes))
    }

    /// Loads a container and returns it with the SHA-256 of the file.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Container::from_bytes(&bytes)?, hash_bytes(&bytes)))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

/// Every parameter of `model` as `f32` tensors, in visiting order.
pub fn collect_tensors<T: Real>(model: &dyn Params<T>, prefix: &str) -> Vec<Tensor> {
    let mut out = Vec::new();
    model.visit(prefix, &mut |name, p| {
        out.push(Tensor {
            name,
            shape: vec![p.value.rows, p.value.cols],
            data: p.value.data.iter().map(|v| v.to_f64() as f32).collect(),
        })
    });
    out
}

/// Fills every parameter of `model` from `tensors`; names and shapes must
/// match exactly.
pub fn assign_tensors<T: Real>(model: &mut dyn Params<T>, prefix: &str, tensors: &[Tensor]) -> Result<()> {
    let mut err = None;
    let mut used = 0;
    model.visit_mut(prefix, &mut |name, p| {
        if err.is_some() {
            return;
        }
        match tensors.iter().find(|t| t.name == name) {
            Some(t) if t.shape == [p.value.rows, p.value.cols] => {
                p.value = Mat::from_vec(p.value.rows, p.value.cols, t.data.iter().map(|&v| T::from_f64(v as f64)).collect());
                used += 1;
            }
            Some(t) => {
                err = Some(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected [{}, {}]",
                    t.shape, p.value.rows, p.value.cols
                )))
            }
            None => err = Some(Error::Checkpoint(format!("tensor `{name}` missing"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let scope = format!("{prefix}.");
    let expected = tensors
        .iter()
        .filter(|t| prefix.is_empty() || t.name.starts_with(&scope))
        .count();
    if used != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {expected} tensors under `{prefix}` but the model uses {used}"
        )));
    }
    Ok(())
}
