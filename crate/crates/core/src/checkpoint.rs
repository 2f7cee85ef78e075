//! Flat little-endian checkpoint container shared by learner and controller
//! files: an 8-byte magic, a `u32` version, a caller-defined header of `u32`
//! words, then every tensor as `rank, dims..., f64 values`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::{Scalar, Tensor};

pub const VERSION: u32 = 1;

pub(crate) fn write(path: &Path, magic: &[u8; 8], header: &[u32], tensors: &[&Tensor<impl Scalar>]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    for w in header {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8, "tensor data")?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Reads a checkpoint, returning its header words and tensors.
pub(crate) fn read<S: Scalar>(path: &Path, magic: &[u8; 8]) -> Result<(Vec<u32>, Vec<Tensor<S>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8, "magic")? != magic {
        return Err(Error::format(path, 0, "wrong checkpoint magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(path, 8, format!("unsupported checkpoint version {version}")));
    }
    let n_header = r.u32("header length")? as usize;
    let header = (0..n_header).map(|_| r.u32("header")).collect::<Result<Vec<_>>>()?;
    let n_tensors = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let at = r.pos as u64;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| r.f64().map(S::from_f64_lossy))
            .collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::format(path, at, e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, r.pos as u64, "trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}
