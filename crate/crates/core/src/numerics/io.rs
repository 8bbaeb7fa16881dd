//! Little-endian binary encoding of tensors and named tensor lists.
//!
//! A tensor is `b"MACB"`, `u32` rank, `rank` × `u32` dims, then the `f64` payload.
//! A named list is `u32` count followed by (`u32` name length, UTF-8 name, tensor) entries.

use std::io::{Read, Write};

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MACB";

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("bad utf-8 name: {e}")))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for x in t.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = numel(&shape);
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_named<'a, W: Write>(
    w: &mut W,
    items: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>,
) -> Result<()> {
    write_u32(w, items.len() as u32)?;
    for (name, t) in items {
        write_str(w, name)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_named<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let n = read_u32(r)? as usize;
    (0..n)
        .map(|_| Ok((read_str(r)?, read_tensor(r)?)))
        .collect()
}
