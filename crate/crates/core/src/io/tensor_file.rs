//! "VTEN" binary tensor format: magic, version u8, dtype u8, ndim u8, one
//! reserved byte, little-endian u64 extents, then the row-major payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{shape_len, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"VTEN";
pub const TENSOR_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u8, path: &str) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::Format {
                path: path.to_string(),
                detail: format!("unknown dtype code {other}"),
            }),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Serializes a tensor to VTEN bytes. F32 narrows, U8 requires integral
/// values in 0..=255.
pub fn encode_tensor(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::invalid("encode_tensor", "too many dimensions"));
    }
    let mut out = Vec::with_capacity(8 + shape.len() * 8 + t.len() * dtype.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    out.push(0); // reserved
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        DType::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::U8 => {
            for &v in t.data() {
                if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                    return Err(Error::invalid(
                        "encode_tensor",
                        format!("value {v} does not fit dtype u8"),
                    ));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

/// Decodes one tensor from the front of `bytes`, returning the remainder.
pub fn decode_tensor<'a>(bytes: &'a [u8], path: &str) -> Result<(Tensor, DType, &'a [u8])> {
    let fail = |detail: String| Error::Format {
        path: path.to_string(),
        detail,
    };
    if bytes.len() < 8 {
        return Err(fail("truncated header".into()));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(fail(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5], path)?;
    let ndim = bytes[6] as usize;
    let mut offset = 8;
    if bytes.len() < offset + ndim * 8 {
        return Err(fail("truncated extents".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[offset..offset + 8]);
        shape.push(u64::from_le_bytes(buf) as usize);
        offset += 8;
    }
    let count = shape_len(&shape);
    let payload = count * dtype.size();
    if bytes.len() < offset + payload {
        return Err(fail(format!(
            "truncated payload: need {payload} bytes, have {}",
            bytes.len() - offset
        )));
    }
    let body = &bytes[offset..offset + payload];
    let mut data = Vec::with_capacity(count);
    match dtype {
        DType::F64 => {
            for chunk in body.chunks_exact(8) {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(chunk);
                data.push(f64::from_le_bytes(buf));
            }
        }
        DType::F32 => {
            for chunk in body.chunks_exact(4) {
                let mut buf = [0u8; 4];
                buf.copy_from_slice(chunk);
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        DType::U8 => {
            for &b in body {
                data.push(b as f64);
            }
        }
    }
    let tensor = Tensor::from_vec(&shape, data).map_err(|e| fail(e.to_string()))?;
    Ok((tensor, dtype, &bytes[offset + payload..]))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode_tensor(t, dtype)?;
    atomic_write(path, &bytes)
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, DType)> {
    let bytes = fs::read(path)?;
    let display = path.display().to_string();
    let (tensor, dtype, rest) = decode_tensor(&bytes, &display)?;
    if !rest.is_empty() {
        return Err(Error::Format {
            path: display,
            detail: format!("{} trailing bytes", rest.len()),
        });
    }
    Ok((tensor, dtype))
}

/// Writes via a temporary sibling then renames, so readers never observe a
/// half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
