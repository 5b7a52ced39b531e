//! Binary netpbm: P6 (RGB) and P5 (gray) at 8 or 16 bits, plus PGM heatmaps.
//!
//! 16-bit samples are big-endian as netpbm requires.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Encodes a single image with 1 or 3 channels and values in `[0, 1]`.
pub fn encode_pnm<T: Float>(image: &Tensor<T>, depth: BitDepth) -> Result<Vec<u8>> {
    let d = image.dims();
    let magic = match (d.n, d.c) {
        (1, 3) => "P6",
        (1, 1) => "P5",
        _ => {
            return Err(Error::invalid(format!(
                "netpbm holds one 1- or 3-channel image, got dims {:?}",
                d.as_array()
            )))
        }
    };
    let maxval = depth.maxval();
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", d.w, d.h).into_bytes();
    let plane = d.plane();
    for p in 0..plane {
        for c in 0..d.c {
            let idx = c * plane + p;
            let v = image.data()[idx].as_f64();
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange { index: idx, value: v });
            }
            // f64::round rounds half away from zero.
            let q = (v * maxval as f64).round() as u32;
            match depth {
                BitDepth::Eight => out.push(q as u8),
                BitDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
            }
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedHeader {
            offset: self.pos,
            reason: reason.into(),
        }
    }

    /// Skips whitespace and `#` comments; requires at least one separator byte.
    fn separator(&mut self) -> Result<()> {
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.malformed("expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.malformed(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::MalformedHeader {
                offset: start,
                reason: format!("{what} out of range"),
            })
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => {
            return Err(Error::MalformedHeader {
                offset: 0,
                reason: "expected P5 or P6 magic".into(),
            })
        }
    };
    let mut h = Header { bytes, pos: 2 };
    h.separator()?;
    let width = h.number("width")? as usize;
    h.separator()?;
    let height = h.number("height")? as usize;
    h.separator()?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(h.malformed("expected a single whitespace byte after maxval")),
    }
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader {
            offset: maxval_at,
            reason: "zero image dimension".into(),
        });
    }
    let bps = match maxval {
        255 => 1,
        65535 => 2,
        _ => {
            return Err(Error::UnsupportedMaxval {
                offset: maxval_at,
                maxval,
            })
        }
    };
    let plane = width * height;
    let expected = plane * channels * bps;
    let payload = &bytes[h.pos..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            offset: h.pos,
            expected,
            found: payload.len(),
        });
    }
    let scale = maxval as f32;
    let dims = Dims::new(1, channels, height, width);
    let mut data = vec![0f32; dims.len()];
    for p in 0..plane {
        for c in 0..channels {
            let s = (p * channels + c) * bps;
            let q = if bps == 1 {
                payload[s] as u32
            } else {
                u16::from_be_bytes([payload[s], payload[s + 1]]) as u32
            };
            data[c * plane + p] = q as f32 / scale;
        }
    }
    Tensor::from_vec(dims, data)
}

/// Value range recorded next to a heatmap so the linear scaling can be undone.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct HeatmapSidecar {
    pub width: usize,
    pub height: usize,
    pub min: f64,
    pub max: f64,
}

/// Writes a row-major grid as a 16-bit PGM scaled linearly from `[min, max]` to `[0, 65535]`,
/// plus `<path>.json` with the range.
pub fn write_heatmap(path: &Path, grid: &[f64], height: usize, width: usize) -> Result<HeatmapSidecar> {
    if grid.len() != height * width {
        return Err(Error::shape(format!(
            "{} values do not fill a {height}x{width} heatmap",
            grid.len()
        )));
    }
    let min = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let max = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let scaled = Tensor::from_fn(Dims::new(1, 1, height, width), |_, _, y, x| {
        if span > 0.0 {
            (grid[y * width + x] - min) / span
        } else {
            0.0
        }
    });
    super::write_bytes(path, &encode_pnm(&scaled, BitDepth::Sixteen)?)?;
    let side = HeatmapSidecar {
        width,
        height,
        min,
        max,
    };
    let mut json_path = path.as_os_str().to_owned();
    json_path.push(".json");
    let mut text = serde_json::to_string_pretty(&side)?;
    text.push('\n');
    super::write_bytes(Path::new(&json_path), text.as_bytes())?;
    Ok(side)
}
