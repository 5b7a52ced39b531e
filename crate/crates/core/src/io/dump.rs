//! `ATBT` tensor dumps: magic, version byte, four LE u32 dims, LE f32 payload.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Float, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"ATBT";
pub const TENSOR_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 16;

pub fn encode_tensor<T: Float>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    for d in t.dims().as_array() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

/// Decodes one dump from the front of `bytes`; returns the tensor and the bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            offset: 0,
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::MalformedHeader {
            offset: 0,
            reason: "missing ATBT magic".into(),
        });
    }
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::VersionMismatch {
            found: bytes[4] as u32,
            expected: TENSOR_VERSION as u32,
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    }
    let dims = Dims::from(dims);
    let payload = dims
        .len()
        .checked_mul(4)
        .ok_or_else(|| Error::MalformedHeader {
            offset: 5,
            reason: "dims overflow".into(),
        })?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < payload {
        return Err(Error::Truncated {
            offset: HEADER_LEN,
            expected: payload,
            found: body.len(),
        });
    }
    let data = body[..payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((Tensor::from_vec(dims, data)?, HEADER_LEN + payload))
}
