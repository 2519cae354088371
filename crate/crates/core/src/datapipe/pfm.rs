//! Grayscale portable float maps.
//!
//! Header `Pf\n<width> <height>\n<scale>\n`, then rows of 32-bit floats from
//! the bottom of the image to the top. A negative scale marks little-endian
//! data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Encodes an `(H, W)` map as little-endian PFM bytes.
pub fn encode_pfm(map: &Tensor) -> Result<Vec<u8>> {
    if map.rank() != 2 {
        return Err(Error::shape(format!("pfm needs (H,W), got {:?}", map.shape())));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for row in (0..h).rev() {
        for v in &map.data()[row * w..(row + 1) * w] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok().filter(|s| !s.is_empty())
}

/// Decodes grayscale PFM bytes into an `(H, W)` map. `path` only labels errors.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: &str| Error::format(path, msg);
    let mut pos = 0;
    match next_token(bytes, &mut pos) {
        Some("Pf") => {}
        Some("PF") => return Err(bad("colour PFM is not supported, expected Pf")),
        _ => return Err(bad("missing Pf magic")),
    }
    let mut dim = || -> Result<usize> {
        next_token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad dimensions"))
    };
    let (w, h) = (dim()?, dim()?);
    let scale: f64 = next_token(bytes, &mut pos)
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale must be nonzero"));
    }
    // exactly one whitespace byte separates the header from the payload
    pos += 1;
    let need = h * w * 4;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| bad(&format!("payload truncated: need {need} bytes")))?;
    let little = scale < 0.0;
    let mut data = vec![0.0; h * w];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (row, col) = (h - 1 - i / w, i % w);
        data[row * w + col] = v as f64;
    }
    Tensor::new(vec![h, w], data)
}

pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, encode_pfm(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}
