//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes          | content                          |
//! |----------------|----------------------------------|
//! | 4              | magic `PVTD`                     |
//! | 1              | version `0x01`                   |
//! | 1              | dtype `0x01` (f64 LE)            |
//! | 1              | rank `r`                         |
//! | 8·r            | dims as u64                      |
//! | 8·∏dims        | row-major f64 payload            |

use std::io::{Read, Write};
use std::path::Path;

use super::{NumericsError, Tensor};

pub const MAGIC: &[u8; 4] = b"PVTD";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F64_LE: u8 = 0x01;

pub fn encode(t: &Tensor) -> Result<Vec<u8>, NumericsError> {
    let rank = u8::try_from(t.dims().len())
        .map_err(|_| NumericsError::Format(format!("rank {} exceeds 255", t.dims().len())))?;
    let mut out = Vec::with_capacity(7 + 8 * t.dims().len() + 8 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F64_LE);
    out.push(rank);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, NumericsError> {
    let fail = |msg: &str| NumericsError::Format(msg.to_string());
    if bytes.len() < 7 {
        return Err(fail("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(NumericsError::Format(format!("unsupported version {:#04x}", bytes[4])));
    }
    if bytes[5] != DTYPE_F64_LE {
        return Err(NumericsError::Format(format!("unsupported dtype {:#04x}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let mut pos = 7;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let chunk = bytes.get(pos..pos + 8).ok_or_else(|| fail("truncated dims"))?;
        let d = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        dims.push(usize::try_from(d).map_err(|_| fail("dim overflows usize"))?);
        pos += 8;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| fail("element count overflows"))?;
    let payload = &bytes[pos..];
    if payload.len() != count * 8 {
        return Err(NumericsError::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            count * 8
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(dims, data)
}

pub fn write_to(t: &Tensor, mut w: impl Write) -> Result<(), NumericsError> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

pub fn read_from(mut r: impl Read) -> Result<Tensor, NumericsError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Writes `t` to `path` via a sibling temp file and rename.
pub fn save(t: &Tensor, path: &Path) -> Result<(), NumericsError> {
    crate::io_util::write_atomic(path, &encode(t)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor, NumericsError> {
    decode(&std::fs::read(path)?)
}
