//! Binary PGM/PPM encoders for inspecting images, maps and masks.

use crate::cam::LabelGrid;
use crate::error::{arg, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P6 encoding of a `3×H×W` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return arg(format!("expected a 3xHxW image, got {s:?}"));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + p]));
        }
    }
    Ok(out)
}

/// P5 encoding of raw label values.
pub fn encode_pgm_labels(grid: &LabelGrid) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend_from_slice(&grid.data);
    out
}

/// P5 encoding of a row-major `height×width` map in `[0, 1]`.
pub fn encode_pgm_map(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return arg(format!("{} values for a {height}x{width} map", values.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Splits a P5/P6 file into (width, height, channels, payload).
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return arg("truncated netpbm header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or(""));
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return arg(format!("unsupported netpbm magic {m:?}")),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| crate::Error::Argument(format!("bad header field {s:?}")));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let payload = &bytes[pos + 1..];
    if payload.len() != w * h * channels {
        return arg("netpbm payload size does not match header");
    }
    Ok((w, h, channels, payload))
}
