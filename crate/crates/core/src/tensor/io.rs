//! `TSR1` tensor files.
//!
//! Layout (all little-endian): 8-byte magic `TSR1\0\0\0\0`, `u32` rank,
//! `rank × u64` extents, then the row-major `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Float, Tensor};
use crate::error::{Error, Result};

pub const TSR_MAGIC: [u8; 8] = *b"TSR1\0\0\0\0";

/// Upper bound on rank accepted when reading, to reject garbage headers early.
const MAX_RANK: u32 = 16;

pub fn write_tsr_to<T: Float, W: Write>(tensor: &Tensor<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(&TSR_MAGIC)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &extent in tensor.shape() {
        w.write_all(&(extent as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one tensor; `origin` names the source in error messages.
pub fn read_tsr_from<R: Read>(mut r: R, origin: &Path) -> Result<Tensor<f32>> {
    let bad = |detail: String| Error::format(origin, detail);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| bad(format!("truncated header: {e}")))?;
    if magic != TSR_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|e| bad(format!("truncated rank: {e}")))?;
    let rank = u32::from_le_bytes(word);
    if rank > MAX_RANK {
        return Err(bad(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext)
            .map_err(|e| bad(format!("truncated extents: {e}")))?;
        let extent = usize::try_from(u64::from_le_bytes(ext))
            .map_err(|_| bad("extent overflows usize".into()))?;
        numel = numel
            .checked_mul(extent)
            .ok_or_else(|| bad("element count overflows".into()))?;
        shape.push(extent);
    }
    let mut bytes = vec![0u8; numel * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| bad(format!("truncated payload ({numel} floats expected): {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tsr<T: Float>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tsr_to(tensor, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tsr(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::format(path, format!("cannot open: {e}")))?;
    let mut r = BufReader::new(file);
    let t = read_tsr_from(&mut r, path)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok(t)
}
