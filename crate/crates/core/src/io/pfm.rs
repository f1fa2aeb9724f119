//! Grayscale PFM: `Pf`, `W H`, a scale whose sign gives the byte order (negative means
//! little-endian), then 32-bit floats row by row from the bottom row up. Invalid pixels are
//! written as `+inf`; non-finite or non-positive values read back as invalid.

use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::scene::DepthMap;

const FORMAT: &str = "PFM";

fn malformed(detail: impl Into<String>) -> Error {
    Error::MalformedHeader {
        format: FORMAT,
        detail: detail.into(),
    }
}

pub fn encode_pfm(depth: &DepthMap) -> Vec<u8> {
    let (w, h) = (depth.width(), depth.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for i in (0..h).rev() {
        for j in 0..w {
            let v = if depth.is_valid(i, j) {
                depth.get(i, j) as f32
            } else {
                f32::INFINITY
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Reads one whitespace-terminated header token starting at `*pos`.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(malformed("header ends early"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| malformed("header is not ASCII"))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let mut pos = 0;
    match token(bytes, &mut pos)? {
        "Pf" => {}
        "PF" => return Err(malformed("color PFM (PF) where grayscale (Pf) was expected")),
        other => return Err(malformed(format!("unknown magic {other:?}"))),
    }
    let w: usize = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| malformed("bad width"))?;
    let h: usize = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| malformed("bad height"))?;
    let scale: f64 = token(bytes, &mut pos)?
        .parse()
        .map_err(|_| malformed("bad scale"))?;
    if w == 0 || h == 0 {
        return Err(malformed("zero dimension"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(malformed("scale must be finite and non-zero"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::TruncatedData {
            expected: pos + 1 + w * h * 4,
            found: bytes.len(),
        });
    }
    pos += 1;
    let need = w * h * 4;
    if bytes.len() - pos < need {
        return Err(Error::TruncatedData {
            expected: pos + need,
            found: bytes.len(),
        });
    }
    let little = scale < 0.0;
    let mut data = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for (n, chunk) in bytes[pos..pos + need].chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        } as f64;
        let (row_from_bottom, j) = (n / w, n % w);
        let k = (h - 1 - row_from_bottom) * w + j;
        if v.is_finite() && v > 0.0 {
            data[k] = v;
            valid[k] = true;
        }
    }
    DepthMap::with_mask(w, h, data, valid)
}

pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    write_atomic(path, &encode_pfm(depth))
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}
