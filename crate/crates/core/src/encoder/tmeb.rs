//! `TMEB` files: precomputed patch-embedding grids and prompt embeddings.
//!
//! Layout (integers little-endian `u32`, floats little-endian `f32`):
//! `"TMEB"`, version, `d_c`, patch, count; `count` entries of
//! `{stem_len, stem, H_p, W_p, H_p*W_p*d_c floats}`; then `n_prompts` and per
//! prompt `{name_len, name, d_c floats}`.

use std::path::Path;

use crate::autograd::checkpoint::Reader;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TMEB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GridEntry {
    pub stem: String,
    pub hp: usize,
    pub wp: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub patch: usize,
    pub entries: Vec<GridEntry>,
    pub prompts: Vec<(String, Vec<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl EmbeddingFile {
    pub fn new(dim: usize, patch: usize) -> Self {
        EmbeddingFile {
            dim,
            patch,
            entries: Vec::new(),
            prompts: Vec::new(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        put_u32(&mut out, self.dim);
        put_u32(&mut out, self.patch);
        put_u32(&mut out, self.entries.len());
        for e in &self.entries {
            if e.data.len() != e.hp * e.wp * self.dim {
                return Err(Error::shape("TMEB entry", &[e.hp, e.wp, self.dim], &[e.data.len()]));
            }
            put_str(&mut out, &e.stem);
            put_u32(&mut out, e.hp);
            put_u32(&mut out, e.wp);
            put_f32s(&mut out, &e.data);
        }
        put_u32(&mut out, self.prompts.len());
        for (name, v) in &self.prompts {
            if v.len() != self.dim {
                return Err(Error::shape("TMEB prompt", &[self.dim], &[v.len()]));
            }
            put_str(&mut out, name);
            put_f32s(&mut out, v);
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(MAGIC, VERSION)?;
        let at = r.offset();
        let dim = r.u32("d_c")? as usize;
        if dim == 0 {
            return Err(Error::format(at, "d_c must be positive"));
        }
        let patch = r.u32("patch")? as usize;
        let count = r.u32("entry count")? as usize;
        let mut file = EmbeddingFile::new(dim, patch);
        for _ in 0..count {
            let stem = r.string("stem")?;
            let at = r.offset();
            let hp = r.u32("H_p")? as usize;
            let wp = r.u32("W_p")? as usize;
            if hp == 0 || wp == 0 {
                return Err(Error::format(at, format!("empty grid for {stem}")));
            }
            let n = hp
                .checked_mul(wp)
                .and_then(|v| v.checked_mul(dim))
                .ok_or_else(|| Error::format(at, "grid size overflow"))?;
            let data = r.f32s(n, &format!("grid of {stem}"))?;
            file.entries.push(GridEntry { stem, hp, wp, data });
        }
        let n_prompts = r.u32("prompt count")? as usize;
        for _ in 0..n_prompts {
            let name = r.string("prompt name")?;
            let v = r.f32s(dim, &format!("prompt {name}"))?;
            file.prompts.push((name, v));
        }
        if !r.at_end() {
            return Err(Error::format(r.offset(), "trailing bytes after prompt section"));
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn grid(&self, stem: &str) -> Result<&GridEntry> {
        self.entries
            .iter()
            .find(|e| e.stem == stem)
            .ok_or_else(|| Error::NotFound(format!("no embedding grid for stem {stem:?}")))
    }

    pub fn prompt(&self, name: &str) -> Result<&[f32]> {
        self.prompts
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::NotFound(format!("no prompt embedding named {name:?}")))
    }
}
