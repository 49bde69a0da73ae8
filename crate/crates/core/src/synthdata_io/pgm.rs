//! Binary 8-bit grayscale PGM (`P5`, maxval 255).

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{CksError, Result};
use crate::types::{Image, Mask};

pub fn encode(pixels: &Array2<u8>) -> Vec<u8> {
    let (h, w) = pixels.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter());
    out
}

fn depth_error(path: &Path, detail: impl Into<String>) -> CksError {
    CksError::BadImageDepth {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses a P5 file; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Array2<u8>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // Skip whitespace and comments between header tokens.
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(depth_error(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(depth_error(
            path,
            format!("expected binary PGM `P5`, found `{}`", fields[0]),
        ));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| depth_error(path, format!("bad {what} `{s}`")))
    };
    let w = parse(&fields[1], "width")?;
    let h = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(depth_error(path, format!("maxval {maxval}, expected 255")));
    }
    let data = bytes.get(pos..).unwrap_or(&[]);
    if data.len() != w * h {
        return Err(depth_error(
            path,
            format!("raster holds {} bytes, expected {}x{} = {}", data.len(), w, h, w * h),
        ));
    }
    Array2::from_shape_vec((h, w), data.to_vec()).map_err(|e| depth_error(path, e.to_string()))
}

fn read(path: &Path) -> Result<Array2<u8>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CksError::MissingFile(path.to_path_buf()),
        _ => CksError::io(path, e),
    })?;
    decode(&bytes, path)
}

fn write(path: &Path, pixels: &Array2<u8>) -> Result<()> {
    fs::write(path, encode(pixels)).map_err(|e| CksError::io(path, e))
}

/// Intensities are stored as `round(255 v)`.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    write(path, &img.pixels().mapv(|v| (v * 255.0).round() as u8))
}

pub fn read_image(path: &Path) -> Result<Image> {
    Image::new(read(path)?.mapv(|v| f64::from(v) / 255.0))
}

/// Foreground is stored as 255, background as 0.
pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    write(path, &m.labels().mapv(|v| v * 255))
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let raw = read(path)?;
    if let Some(((r, c), v)) = raw.indexed_iter().find(|(_, &v)| v != 0 && v != 255) {
        return Err(depth_error(
            path,
            format!("mask value {v} at ({r}, {c}) is neither 0 nor 255"),
        ));
    }
    Mask::new(raw.mapv(|v| u8::from(v == 255)))
}
