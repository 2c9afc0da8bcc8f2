//! SGT binary tensor files.
//!
//! Layout: magic `SGT1`, u8 dtype code (0 = f32), u8 rank, rank × u64
//! little-endian extents, then the row-major little-endian payload.
//! Used for checkpoints, dataset samples, and exported predictions.
//!
//! `parse` is total over arbitrary bytes: it validates magic, dtype,
//! rank, extent overflow, and payload length before allocating, and is
//! the entry point the fuzz target drives.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGT1";
pub const DTYPE_F32: u8 = 0;

/// Largest element count `parse` will accept; keeps hostile headers from
/// requesting absurd allocations.
pub const MAX_ELEMENTS: u64 = 1 << 31;

pub fn encode(dims: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len(), "encode: dims/data mismatch");
    let mut out = Vec::with_capacity(4 + 2 + dims.len() * 8 + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>)> {
    let fail = |m: &str| Error::Format(format!("sgt: {m}"));
    if bytes.len() < 6 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(fail(&format!("unsupported dtype code {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + rank * 8;
    if bytes.len() < header {
        return Err(fail("truncated extents"));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for r in 0..rank {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[6 + r * 8..6 + r * 8 + 8]);
        let d = u64::from_le_bytes(b);
        count = count
            .checked_mul(d)
            .filter(|&c| c <= MAX_ELEMENTS)
            .ok_or_else(|| fail("extent product overflows"))?;
        dims.push(d as usize);
    }
    let payload = &bytes[header..];
    if payload.len() != count as usize * 4 {
        return Err(fail(&format!(
            "payload length {} does not match {} elements",
            payload.len(),
            count
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

pub fn read_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_file(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    write_bytes_atomic(path, &encode(dims, data))
}

pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".tmp.{}.{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("sgt")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
