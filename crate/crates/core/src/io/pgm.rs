//! Binary greyscale PGM (`P5`), 8- or 16-bit. Sixteen-bit samples are
//! big-endian as the format requires.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};

#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub maxval: u16,
    pub pixels: Array2<u16>,
}

impl Pgm {
    /// Samples rescaled to the full 16-bit range.
    pub fn to_u16_full_range(&self) -> Array2<u16> {
        if self.maxval == u16::MAX {
            return self.pixels.clone();
        }
        let m = self.maxval as u32;
        self.pixels
            .mapv(|v| ((v.min(self.maxval) as u32 * 65535 + m / 2) / m) as u16)
    }

    /// Samples as floats in `[0, 1]`.
    pub fn to_unit(&self) -> Array2<f32> {
        let m = self.maxval as f32;
        self.pixels.mapv(|v| v as f32 / m)
    }
}

fn next_token<'a>(buf: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() && buf[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("pgm", "truncated header"));
    }
    Ok(&buf[start..*pos])
}

fn header_number(buf: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(buf, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("pgm", format!("bad {what}")))
}

pub fn decode(buf: &[u8]) -> Result<Pgm> {
    let mut pos = 0;
    if next_token(buf, &mut pos)? != b"P5" {
        return Err(Error::format("pgm", "expected P5 magic"));
    }
    let width = header_number(buf, &mut pos, "width")?;
    let height = header_number(buf, &mut pos, "height")?;
    let maxval = header_number(buf, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("pgm", format!("maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bps;
    let body = buf
        .get(pos..pos + need)
        .ok_or_else(|| Error::format("pgm", format!("expected {need} raster bytes")))?;
    let data: Vec<u16> = if bps == 1 {
        body.iter().map(|&b| b as u16).collect()
    } else {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    let pixels = Array2::from_shape_vec((height, width), data).expect("length checked");
    Ok(Pgm {
        maxval: maxval as u16,
        pixels,
    })
}

pub fn encode(pixels: &Array2<u16>, maxval: u16) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    if maxval < 256 {
        out.extend(pixels.iter().map(|&v| v.min(maxval) as u8));
    } else {
        for &v in pixels.iter() {
            out.extend_from_slice(&v.min(maxval).to_be_bytes());
        }
    }
    out
}

pub fn read(path: &Path) -> Result<Pgm> {
    decode(&read_file(path)?)
}

pub fn write(path: &Path, pixels: &Array2<u16>, maxval: u16) -> Result<()> {
    write_file(path, &encode(pixels, maxval))
}

/// Writes a float image as 16-bit PGM, linearly scaled so the maximum maps
/// to 65535 (an all-zero image stays zero).
pub fn write_scaled(path: &Path, image: &Array2<f32>) -> Result<()> {
    let max = image.iter().copied().fold(0.0f32, f32::max);
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let pixels = image.mapv(|v| (v.max(0.0) * scale).round().min(65535.0) as u16);
    write(path, &pixels, u16::MAX)
}

/// Writes a float image in `[0, 1]` as 16-bit PGM without rescaling.
pub fn write_unit(path: &Path, image: &Array2<f32>) -> Result<()> {
    let pixels = image.mapv(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16);
    write(path, &pixels, u16::MAX)
}

pub fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    write(path, &mask.mapv(|m| if m { 255 } else { 0 }), 255)
}

pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    Ok(read(path)?.pixels.mapv(|v| v > 0))
}
