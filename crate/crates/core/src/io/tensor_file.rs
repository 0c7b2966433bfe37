//! Binary tensor files.
//!
//! Layout: `MVTN`, format version (u8), element size in bytes (u8, 4 or 8),
//! rank (u32 LE), dims (u64 LE each), then the row-major payload in
//! little-endian IEEE-754.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MVTN";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemType {
    F32,
    F64,
}

impl ElemType {
    fn code(self) -> u8 {
        match self {
            ElemType::F32 => 4,
            ElemType::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, elem: ElemType) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 8 * t.rank() + t.numel() * elem.code() as usize);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(elem.code());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match elem {
        ElemType::F32 => t.data().iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        ElemType::F64 => t.data().iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |d: String| Error::format(path, d);
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| Error::format(path, format!("truncated at byte {}", *pos)))?;
        *pos += n;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 4)? != MAGIC {
        return Err(bad("bad magic, not a tensor file".into()));
    }
    let version = take(&mut pos, 1)?[0];
    if version != VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let size = take(&mut pos, 1)?[0];
    if size != 4 && size != 8 {
        return Err(bad(format!("unknown element size {size}")));
    }
    let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().expect("8 bytes")) as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = take(&mut pos, numel * size as usize)?;
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let data = if size == 4 {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(path: &Path, t: &Tensor, elem: ElemType) -> Result<()> {
    write_atomic(path, &encode_tensor(t, elem))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
