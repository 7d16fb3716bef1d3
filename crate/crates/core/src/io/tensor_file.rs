//! Bit-exact binary tensor container.
//!
//! Layout (all little-endian):
//!
//! | offset | size        | field                          |
//! |--------|-------------|--------------------------------|
//! | 0      | 4           | magic `"TSTN"`                 |
//! | 4      | 4           | format version (u32) = 1       |
//! | 8      | 1           | dtype code (u8); 1 = f32       |
//! | 9      | 1           | ndim (u8)                      |
//! | 10     | 4 * ndim    | dims (u32 each)                |
//! | ...    | 4 * numel   | row-major f32 payload          |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"TSTN";
pub const TENSOR_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor<f32>) -> Result<()> {
    let dims = tensor.dims();
    if dims.len() > u8::MAX as usize {
        return Err(Error::invalid(format!("too many dims: {}", dims.len())));
    }
    if let Some(&too_big) = dims.iter().find(|&&d| d > u32::MAX as usize) {
        return Err(Error::invalid(format!("dim {too_big} exceeds u32")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in tensor.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut take = |buf: &mut [u8], what: &str| -> Result<u64> {
        let at = offset;
        r.read_exact(buf).map_err(|_| Error::TensorFormat {
            offset: at,
            msg: format!("truncated while reading {what}"),
        })?;
        offset += buf.len() as u64;
        Ok(at)
    };

    let mut magic = [0u8; 4];
    take(&mut magic, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::TensorFormat {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected \"TSTN\""),
        });
    }
    let mut ver = [0u8; 4];
    take(&mut ver, "version")?;
    let version = u32::from_le_bytes(ver);
    if version != TENSOR_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: TENSOR_VERSION,
        });
    }
    let mut head = [0u8; 2];
    take(&mut head, "dtype/ndim")?;
    if head[0] != DTYPE_F32 {
        return Err(Error::TensorFormat {
            offset: 8,
            msg: format!("unsupported dtype code {}", head[0]),
        });
    }
    let ndim = head[1] as usize;
    if ndim == 0 {
        return Err(Error::TensorFormat {
            offset: 9,
            msg: "ndim must be at least 1".into(),
        });
    }

    let mut dims = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for i in 0..ndim {
        let mut d = [0u8; 4];
        let at = take(&mut d, "dims")?;
        let dim = u32::from_le_bytes(d) as usize;
        if dim == 0 {
            return Err(Error::TensorFormat {
                offset: at,
                msg: format!("dim {i} is zero"),
            });
        }
        numel = numel.checked_mul(dim).ok_or(Error::TensorFormat {
            offset: at,
            msg: "dim product overflows".into(),
        })?;
        dims.push(dim);
    }

    let payload_start = offset;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = numel * 4;
    if payload.len() != expected {
        return Err(Error::TensorFormat {
            offset: payload_start,
            msg: format!(
                "payload is {} bytes for dims {dims:?}, expected {expected}",
                payload.len()
            ),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&dims, data)
}
