//! Binary checkpoint container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  b"DBCKPT\0\x01"   (last byte = format version)
//! step       u64      optimizer step counter
//! n_entries  u32
//! entry*     name_len u16, name utf-8,
//!            branch u8 (0 understanding, 1 generation),
//!            flags u8 (bit 0: optimizer moments follow),
//!            ndim u8, dims u32 × ndim,
//!            values f64 × numel,
//!            [first moment f64 × numel, second moment f64 × numel]
//! n_meta     u32
//! meta*      key_len u16, key utf-8, value_len u32, value utf-8
//! ```
//!
//! Entries are written in name order and metadata in key order, so equal
//! checkpoints are equal byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Branch, OptimizerState, ParamTree, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DBCKPT\0\x01";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamTree,
    pub optimizer: OptimizerState,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(params: ParamTree) -> Self {
        Checkpoint {
            params,
            optimizer: OptimizerState::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, entry) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.branch.code());
            let m = self.optimizer.first_moment.get(name);
            let v = self.optimizer.second_moment.get(name);
            let has_moments = m.is_some() && v.is_some();
            out.push(u8::from(has_moments));
            let t = &entry.tensor;
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_floats(&mut out, &t.data);
            if let (Some(m), Some(v)) = (m, v) {
                put_floats(&mut out, m);
                put_floats(&mut out, v);
            }
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err("bad magic"));
        }
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = ParamTree::new();
        let mut optimizer = OptimizerState::new();
        optimizer.step = step;
        for _ in 0..n {
            let name_len = r.u16()? as usize;
            let name = r.string(name_len)?;
            let branch = Branch::from_code(r.u8()?).ok_or_else(|| r.err("bad branch tag"))?;
            let flags = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.floats(numel)?;
            params.insert(name.clone(), branch, Tensor::new(shape, data)?)?;
            if flags & 1 == 1 {
                optimizer.first_moment.insert(name.clone(), r.floats(numel)?);
                optimizer.second_moment.insert(name, r.floats(numel)?);
            }
        }
        let n_meta = r.u32()? as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let kl = r.u16()? as usize;
            let k = r.string(kl)?;
            let vl = r.u32()? as usize;
            let v = r.string(vl)?;
            meta.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint {
            params,
            optimizer,
            meta,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    Checkpoint::from_bytes(&bytes, path)
}

fn put_floats(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: &str) -> Error {
        Error::format("checkpoint", self.path, format!("{reason} at byte {}", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n * 8)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_stable() {
        let mut p = ParamTree::new();
        p.insert("b.w", Branch::Generation, Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]).unwrap())
            .unwrap();
        p.insert("a.w", Branch::Understanding, Tensor::from_vec(vec![0.1])).unwrap();
        let mut ck = Checkpoint::new(p);
        ck.optimizer.step = 7;
        ck.optimizer.first_moment.insert("a.w".into(), vec![0.5]);
        ck.optimizer.second_moment.insert("a.w".into(), vec![0.25]);
        ck.meta.insert("stage".into(), "1".into());
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let ck = Checkpoint::new(ParamTree::new());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT", Path::new("mem")).is_err());
    }
}
