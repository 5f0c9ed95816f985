//! Binary 16-bit greyscale PGM output for score and mask maps.

use std::fs;
use std::path::Path;

use crate::error::{Error, IoContext, Result};

/// Writes a `P5` image with maxval 65535 (big-endian samples).
pub fn write_pgm16(path: &Path, rows: usize, cols: usize, pixels: &[u16]) -> Result<()> {
    if pixels.len() != rows * cols {
        return Err(Error::DimMismatch(format!(
            "{} pixels for a {rows}x{cols} image",
            pixels.len()
        )));
    }
    let mut buf = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    buf.reserve(pixels.len() * 2);
    for p in pixels {
        buf.extend_from_slice(&p.to_be_bytes());
    }
    fs::write(path, buf).at(path)
}

/// Reads an image written by [`write_pgm16`]; returns `(rows, cols, pixels)`.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).at(path)?;
    let corrupt = || Error::Corrupt(format!("{}: not a 16-bit P5 image", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            pos += 1;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt())?.to_string());
    }
    pos += 1;
    let num = |s: &str| s.parse::<usize>().map_err(|_| corrupt());
    if fields[0] != "P5" || num(&fields[3])? != 65535 {
        return Err(corrupt());
    }
    let (cols, rows) = (num(&fields[1])?, num(&fields[2])?);
    let body = bytes.get(pos..).ok_or_else(corrupt)?;
    if body.len() != rows * cols * 2 {
        return Err(corrupt());
    }
    let pixels = body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((rows, cols, pixels))
}

/// `round(score · 65535)` with scores clamped to `[0, 1]`.
pub fn score_pixels(scores: &[f32]) -> Vec<u16> {
    scores
        .iter()
        .map(|&s| (s.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect()
}

/// Positive pixels white, everything else black.
pub fn mask_pixels(mask: &[u8]) -> Vec<u16> {
    mask.iter().map(|&m| if m == 1 { u16::MAX } else { 0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_scaling() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("a.pgm");
        let px = score_pixels(&[0.0, 0.5, 1.0, 2.0, -1.0, 0.25]);
        assert_eq!(px, vec![0, 32768, 65535, 65535, 0, 16384]);
        write_pgm16(&p, 2, 3, &px).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n65535\n"));
        assert_eq!(read_pgm16(&p).unwrap(), (2, 3, px));
        assert!(write_pgm16(&p, 2, 2, &[0; 3]).is_err());
    }

    #[test]
    fn empty_mask_is_black() {
        assert!(mask_pixels(&[0; 16]).iter().all(|&v| v == 0));
        assert_eq!(mask_pixels(&[0, 1, 255]), vec![0, 65535, 0]);
    }
}
