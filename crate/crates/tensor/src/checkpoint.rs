//! `VXSN` parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VXSN" | version: u32 | { name_len: u32 | name: utf-8 | rank: u32 | extents: u32[rank] | values: f64[] }*
//! ```
//!
//! Records run to end of file.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"VXSN";
pub const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        let len = u32::try_from(name.len()).map_err(|_| TensorError::invalid("checkpoint", "name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| TensorError::invalid("checkpoint", "extent exceeds u32"))?;
            w.write_all(&e.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_bytes(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensors(&mut out, tensors).expect("writing to a Vec cannot fail");
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(TensorError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(TensorError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let mut cur = Cursor { buf, pos: 4 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }
    let mut out = Vec::new();
    while cur.pos < buf.len() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| TensorError::invalid("checkpoint", "tensor name is not utf-8"))?
            .to_string();
        let rank = cur.u32()? as usize;
        if rank > MAX_RANK {
            return Err(TensorError::invalid("checkpoint", format!("rank {rank} of {name:?}")));
        }
        let shape = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or(TensorError::Truncated)?;
        let bytes = cur.take(count.checked_mul(8).ok_or(TensorError::Truncated)?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
