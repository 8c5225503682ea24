//! Binary tensor records: rank and dims as little-endian `u64`, then the
//! row-major values as little-endian `f32`.

use std::io::{Read, Write};

use crate::{Result, Scalar, Tensor, TensorError};

const MAX_RANK: u64 = 8;

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(TensorError::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| TensorError::Format("element count overflows".into()))?;
        shape.push(d as usize);
    }
    let mut raw = vec![0u8; (numel as usize) * 4];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| S::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

/// Serialized size in bytes of a tensor with this shape.
pub fn encoded_len(shape: &[usize]) -> usize {
    8 + 8 * shape.len() + 4 * shape.iter().product::<usize>()
}
