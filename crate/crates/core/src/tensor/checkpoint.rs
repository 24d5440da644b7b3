//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `FSMCPOSE`, `u32` version, `u32` tensor count,
//! then per tensor `u16` name length, UTF-8 name, `u8` rank, `u32` extents and
//! raw `f32` data.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FSMCPOSE";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, entries: &[(String, Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&u32::try_from(entries.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?.to_le_bytes())?;
    for (name, t) in entries {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.write_all(&name_len.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
        out.write_all(&[rank])?;
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Checkpoint(format!("extent too large in {name}")))?;
            out.write_all(&e.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated while reading {what}: {e}")))?;
    Ok(b)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 8] = read_exact(&mut r, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an FSMCPOSE checkpoint".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r, "version")?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r, "tensor count")?);
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let [rank] = read_exact::<_, 1>(&mut r, "rank")?;
        let shape = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(read_exact(&mut r, "extent")?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(|e| Error::Checkpoint(format!("truncated data for {name}: {e}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    Ok(entries)
}
