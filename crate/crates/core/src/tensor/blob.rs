//! `KVT1` tensor blob format.
//!
//! Layout (little-endian): magic `b"KVT1"`, `u32` rank, `rank × u64` extents,
//! `u8` dtype code (0 = f32, 1 = f64), then the raw values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{numel_of, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KVT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlobDtype {
    F32,
    F64,
}

impl BlobDtype {
    fn code(self) -> u8 {
        match self {
            BlobDtype::F32 => 0,
            BlobDtype::F64 => 1,
        }
    }
}

pub fn write_blob_to<W: Write>(w: &mut W, t: &Tensor, dtype: BlobDtype) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    w.write_all(&[dtype.code()])?;
    match dtype {
        BlobDtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        BlobDtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_blob(path: impl AsRef<Path>, t: &Tensor, dtype: BlobDtype) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_blob_to(&mut w, t, dtype)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated blob: {e}")))?;
    Ok(buf)
}

pub fn read_blob_from<R: Read>(r: &mut R) -> Result<(Tensor, BlobDtype)> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(read_exact(r)?) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
    }
    let [code] = read_exact::<_, 1>(r)?;
    let n = numel_of(&shape);
    let (dtype, data) = match code {
        0 => {
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Format(format!("truncated blob payload: {e}")))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            (BlobDtype::F32, data)
        }
        1 => {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)
                .map_err(|e| Error::Format(format!("truncated blob payload: {e}")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            (BlobDtype::F64, data)
        }
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    Ok((Tensor::new(data, &shape)?, dtype))
}

pub fn read_blob(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    Ok(read_blob_from(&mut r)?.0)
}
