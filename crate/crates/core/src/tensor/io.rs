//! Binary tensor serialization.
//!
//! Format (`SLT1`), all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "SLT1"
//! dtype   u8       0 = f32, 1 = f64
//! rank    u8
//! extents rank x u32
//! payload numel x dtype-size, row-major
//! ```
//!
//! Reads are strict: wrong magic, wrong dtype, short payloads, and trailing
//! bytes are all rejected.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"SLT1";
const MAX_RANK: usize = 8;

/// Serialize a tensor (detached values only; tape state is not written).
pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[S::DTYPE as u8])?;
    let rank = t.shape().len();
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds maximum {MAX_RANK}")));
    }
    w.write_all(&[rank as u8])?;
    for &e in t.shape() {
        let e32 = u32::try_from(e)
            .map_err(|_| Error::Format(format!("extent {e} does not fit in u32")))?;
        w.write_all(&e32.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.numel() * S::DTYPE.size_bytes());
    for &v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes_vec());
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Read header fields shared by typed and probing reads.
fn read_header<R: Read>(r: &mut R) -> Result<(Dtype, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {TENSOR_MAGIC:?}"
        )));
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let dtype = Dtype::from_code(byte[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", byte[0])))?;
    r.read_exact(&mut byte)?;
    let rank = byte[0] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds maximum {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let mut ext = [0u8; 4];
        r.read_exact(&mut ext)?;
        let e = u32::from_le_bytes(ext) as usize;
        numel = numel.saturating_mul(e as u64);
        shape.push(e);
    }
    if numel > (1 << 33) {
        return Err(Error::Format(format!("tensor too large: {numel} elements")));
    }
    Ok((dtype, shape))
}

/// Read a tensor, requiring its stored dtype to match `S`.
pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let (dtype, shape) = read_header(r)?;
    if dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {dtype:?}, expected {:?}",
            S::DTYPE
        )));
    }
    let numel: usize = shape.iter().product();
    let sz = dtype.size_bytes();
    let mut payload = vec![0u8; numel * sz];
    r.read_exact(&mut payload)?;
    let data: Vec<S> = payload.chunks_exact(sz).map(S::from_le_slice).collect();
    Tensor::from_vec(&shape, data)
}

/// Dtype and shape of a serialized tensor without decoding the payload.
pub fn probe_header<R: Read>(r: &mut R) -> Result<(Dtype, Vec<usize>)> {
    read_header(r)
}

/// Read a tensor from `path`, rejecting trailing bytes.
pub fn load_tensor<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = std::fs::read(path)?;
    let mut cursor = std::io::Cursor::new(&bytes[..]);
    let t = read_tensor::<S, _>(&mut cursor)?;
    if (cursor.position() as usize) != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            bytes.len() - cursor.position() as usize
        )));
    }
    Ok(t)
}

pub fn save_tensor<S: Scalar>(path: &Path, t: &Tensor<S>) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    std::fs::write(path, buf)?;
    Ok(())
}
