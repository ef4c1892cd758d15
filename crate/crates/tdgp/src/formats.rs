//! Portable pixmaps and raw little-endian depth maps.

use std::fs;
use std::path::Path;

use crate::error::{format_err, io_err, Result};

pub const DEPTH_MAGIC: &[u8; 8] = b"TDGPDPTH";
const DEPTH_HEADER: usize = 16;

/// Encodes `[3, h, w]` values in `[0, 1]` as a binary (P6) pixmap.
pub fn encode_ppm(rgb: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let n = h * w;
    for p in 0..n {
        for c in 0..3 {
            out.push((rgb[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn ppm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Decodes a P6 pixmap with maxval 255 into `([3, h, w] in [0, 1], h, w)`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let mut pos = 0;
    let mut next = || ppm_token(bytes, &mut pos).map(|t| String::from_utf8_lossy(t).into_owned());
    if next().as_deref() != Some("P6") {
        return Err(format_err(path, "not a binary pixmap"));
    }
    let mut num = |what: &str| -> Result<usize> {
        next().and_then(|t| t.parse().ok()).ok_or_else(|| format_err(path, format!("bad {what}")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(format_err(path, format!("unsupported maxval {max}")));
    }
    let data = &bytes[pos + 1..];
    let n = h * w;
    if data.len() != 3 * n {
        return Err(format_err(path, format!("expected {} pixel bytes, found {}", 3 * n, data.len())));
    }
    let mut rgb = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            rgb[c * n + p] = data[3 * p + c] as f64 / 255.0;
        }
    }
    Ok((rgb, h, w))
}

pub fn write_ppm(path: &Path, rgb: &[f64], h: usize, w: usize) -> Result<()> {
    fs::write(path, encode_ppm(rgb, h, w)).map_err(io_err(path))
}

pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    decode_ppm(&fs::read(path).map_err(io_err(path))?, path)
}

/// Magic, `h` and `w` as `u32` LE, then `h * w` `f32` LE values.
pub fn encode_depth(depth: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(DEPTH_HEADER + 4 * depth.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in depth {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    if bytes.len() < DEPTH_HEADER || &bytes[..8] != DEPTH_MAGIC {
        return Err(format_err(path, "not a depth file"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[DEPTH_HEADER..];
    if body.len() != 4 * h * w {
        return Err(format_err(path, format!("expected {} depth bytes, found {}", 4 * h * w, body.len())));
    }
    let d = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((d, h, w))
}

pub fn write_depth(path: &Path, depth: &[f64], h: usize, w: usize) -> Result<()> {
    let d: Vec<f32> = depth.iter().map(|&v| v as f32).collect();
    fs::write(path, encode_depth(&d, h, w)).map_err(io_err(path))
}

pub fn read_depth(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let (d, h, w) = decode_depth(&fs::read(path).map_err(io_err(path))?, path)?;
    Ok((d.into_iter().map(f64::from).collect(), h, w))
}
