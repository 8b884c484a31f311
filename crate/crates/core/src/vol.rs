//! `VOL1` binary tensor container.
//!
//! Layout: magic `VOL1`, `u8` dtype code (0 = f32), `u8` rank, `rank × u64`
//! little-endian extents, then the row-major little-endian payload.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"VOL1";
pub const DTYPE_F32: u8 = 0;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let fail = |m: String| Err(Error::Format(m));
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return fail("missing VOL1 magic".into());
    }
    if bytes[4] != DTYPE_F32 {
        return fail(format!("unsupported dtype code {}", bytes[4]));
    }
    let rank = bytes[5] as usize;
    if rank == 0 {
        return fail("rank 0 volume".into());
    }
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return fail("truncated VOL1 header".into());
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut e = [0u8; 8];
        e.copy_from_slice(&bytes[6 + 8 * i..14 + 8 * i]);
        let e = u64::from_le_bytes(e);
        if e == 0 {
            return fail("zero extent".into());
        }
        shape.push(e as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("extent product overflows".into()))?;
    let expected = n
        .checked_mul(4)
        .and_then(|p| p.checked_add(header))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if bytes.len() != expected {
        return fail(format!(
            "payload length {} does not match extents {shape:?} (expected {} bytes)",
            bytes.len() - header,
            expected - header
        ));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(&shape, data)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
