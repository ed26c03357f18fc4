//! Flat binary tensor format.
//!
//! ```text
//! magic    4 bytes  "PSTN"
//! version  u32 LE   (1)
//! dtype    u32 LE   (1 = f32, 2 = f64)
//! rank     u32 LE
//! extents  rank × u64 LE
//! values   product(extents) × dtype, LE, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PSTN";
pub const VERSION: u32 = 1;

pub fn encode<T: Element>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * tensor.shape().len() + tensor.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &extent in tensor.shape() {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn write<T: Element>(tensor: &Tensor<T>, mut sink: impl Write) -> std::io::Result<()> {
    sink.write_all(&encode(tensor))
}

fn read_u32(src: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    src.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(src: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    src.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads one tensor record. Values stored as another element type are
/// converted to `T`.
pub fn read<T: Element>(mut src: impl Read) -> Result<Tensor<T>> {
    let ctx = "tensor record";
    let bad = |e: std::io::Error| Error::format(ctx, e.to_string());
    let mut magic = [0u8; 4];
    src.read_exact(&mut magic).map_err(bad)?;
    if &magic != MAGIC {
        return Err(Error::format(ctx, format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut src).map_err(bad)?;
    if version != VERSION {
        return Err(Error::format(ctx, format!("unsupported version {version}")));
    }
    let code = read_u32(&mut src).map_err(bad)?;
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::format(ctx, format!("unknown dtype code {code}")))?;
    let rank = read_u32(&mut src).map_err(bad)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::format(ctx, format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u64(&mut src).map_err(bad)? as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::format(ctx, "extent product overflows"))?;
    let mut raw = vec![0u8; len * dtype.size_of()];
    src.read_exact(&mut raw).map_err(bad)?;
    let data: Vec<T> = match dtype {
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
    };
    Tensor::from_vec(&shape, data)
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    read(bytes)
}

pub fn save<T: Element>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut sink = BufWriter::new(file);
    write(tensor, &mut sink).map_err(|e| Error::io(path, e))?;
    sink.flush().map_err(|e| Error::io(path, e))
}

pub fn load<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read(BufReader::new(file))
}
