//! `TMDA` checkpoint files.
//!
//! Layout (all integers little-endian `u32`):
//! `"TMDA"`, version, then records until end of file:
//! `{name_len, name (UTF-8), rank, dims[rank], f32 data}`.

use std::fs;
use std::path::Path;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TMDA";
pub const VERSION: u32 = 1;
const MAX_RANK: u32 = 8;

pub fn encode<S: Scalar>(tensors: &[(String, Tensor<S>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

/// Byte cursor that reports offsets in its errors.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub(crate) fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(Error::format(
                self.offset(),
                format!("{what}: need {n} bytes, {remaining} left"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let at = self.offset();
        let n = self.u32(what)? as usize;
        let b = self.bytes(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(at, format!("{what}: invalid UTF-8")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::format(self.offset(), format!("{what}: size overflow")))?;
        let b = self.bytes(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        let m = self.bytes(4, "magic")?;
        if m != magic {
            return Err(Error::format(0, format!("bad magic {m:?}, expected {:?}", std::str::from_utf8(magic).unwrap_or("?"))));
        }
        let v = self.u32("version")?;
        if v != version {
            return Err(Error::format(4, format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC, VERSION)?;
    let mut out = Vec::new();
    while !r.at_end() {
        let name = r.string("tensor name")?;
        let at = r.offset();
        let rank = r.u32("rank")?;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(at, format!("rank {rank} out of range for {name}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            let at = r.offset();
            let d = r.u32("dimension")? as usize;
            if d == 0 {
                return Err(Error::format(at, format!("zero dimension in {name}")));
            }
            dims.push(d);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| Error::format(at, format!("element count overflow in {name}")))?;
        let data = r.f32s(n, &format!("data of {name}"))?;
        out.push((name, Tensor::from_parts(dims, data)));
    }
    Ok(out)
}

pub fn save<S: Scalar>(path: &Path, tensors: &[(String, Tensor<S>)]) -> Result<()> {
    fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let buf = fs::read(path)?;
    Ok(decode(&buf)?
        .into_iter()
        .map(|(n, t)| (n, t.cast::<S>()))
        .collect())
}
