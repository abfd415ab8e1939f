//! Binary tensor format shared by feature files and checkpoints.
//!
//! Layout: magic `"SHTN"`, u8 dtype code, u8 rank, rank little-endian u64
//! extents, then the raw little-endian element values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

pub const SHTN_MAGIC: &[u8; 4] = b"SHTN";

pub fn write_tensor<E: Scalar, W: Write>(tensor: &Tensor<E>, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(6 + tensor.rank() * 8 + tensor.numel() * E::BYTES);
    buf.extend_from_slice(SHTN_MAGIC);
    buf.push(E::DTYPE.code());
    buf.push(tensor.rank() as u8);
    for &extent in tensor.shape() {
        buf.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf).map_err(|e| Error::Format(format!("tensor write failed: {e}")))
}

pub fn read_tensor<E: Scalar, R: Read>(mut r: R) -> Result<Tensor<E>> {
    let mut header = [0u8; 6];
    read_exact(&mut r, &mut header)?;
    if &header[..4] != SHTN_MAGIC {
        return Err(Error::Format("bad tensor magic (expected SHTN)".into()));
    }
    let dtype = Dtype::from_code(header[4])?;
    if dtype != E::DTYPE {
        return Err(Error::Format(format!(
            "dtype mismatch: file holds {:?}, expected {:?}",
            dtype,
            E::DTYPE
        )));
    }
    let rank = header[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        read_exact(&mut r, &mut ext)?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * E::BYTES];
    read_exact(&mut r, &mut raw)?;
    let data = raw.chunks_exact(E::BYTES).map(E::read_le).collect();
    Tensor::from_vec(shape, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor data: {e}")))
}
