//! Bit-exact binary formats.
//!
//! Tensor record: `b"ICT1"`, `u32` rank, `rank × u32` dims, then the values
//! as little-endian `f32`. Checkpoint: `b"ICK1"`, `u32` entry count, then per
//! entry `u32` name length, UTF-8 name, and an embedded tensor record.
//! Entries are written in lexicographic name order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{NumericsError, Result};
use crate::params::ParamMap;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"ICT1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICK1";

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> NumericsError {
        NumericsError::Format {
            what: self.what,
            offset: self.pos,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: needed {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let start = self.pos;
        if self.take(4)? != TENSOR_MAGIC {
            self.pos = start;
            return Err(self.err("bad tensor magic"));
        }
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(self.err(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| self.err("dimension product overflows"))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("tensor too large"))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data)
    }
}

pub fn decode_tensor(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader {
        buf,
        pos: 0,
        what: "tensor file",
    };
    let t = r.tensor()?;
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn encode_checkpoint(params: &ParamMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut out);
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamMap> {
    let mut r = Reader {
        buf,
        pos: 0,
        what: "checkpoint",
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad checkpoint magic"));
    }
    let count = r.u32()?;
    let mut out = ParamMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| NumericsError::Format {
                what: "checkpoint",
                offset: at,
                reason: "entry name is not UTF-8".into(),
            })?
            .to_string();
        let t = r.tensor()?;
        if out.insert(name.clone(), t).is_some() {
            return Err(r.err(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes after last entry"));
    }
    Ok(out)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * t.numel());
    encode_tensor(t, &mut buf);
    write_atomic(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn save_checkpoint(path: &Path, params: &ParamMap) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamMap> {
    decode_checkpoint(&fs::read(path)?)
}
