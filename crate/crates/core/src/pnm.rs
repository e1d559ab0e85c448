//! Binary netpbm rasters: P5 (grayscale) and P6 (RGB), maxval 255 only.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::PlanarImage;
use crate::real::Real;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_blank(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_blank();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Codec(format!("missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Codec(format!("bad {what}")))
    }
}

/// Decodes a P5/P6 byte stream into planar channels with values in [0, 255].
pub fn decode<T: Real>(bytes: &[u8]) -> Result<PlanarImage<T>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Codec("bad magic (expected P5 or P6)".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Codec(format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::Codec("zero image dimension".into()));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Codec("missing separator before raster".into())),
    }
    let n = width * height * channels;
    let raster = bytes
        .get(cur.pos..cur.pos + n)
        .ok_or_else(|| Error::Codec(format!("truncated raster: need {n} bytes")))?;
    let mut img = PlanarImage::zeros(height, width, channels);
    let plane = width * height;
    for (i, px) in raster.chunks_exact(channels).enumerate() {
        for (c, &b) in px.iter().enumerate() {
            img.data[c * plane + i] = T::c(b as f64);
        }
    }
    Ok(img)
}

/// Encodes 1- or 3-channel images; values are clamped to [0, 255] and rounded half away from zero.
pub fn encode<T: Real>(img: &PlanarImage<T>) -> Result<Vec<u8>> {
    let magic = match img.planes {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Codec(format!("cannot encode {c}-channel image"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    let plane = img.plane_len();
    out.reserve(plane * img.planes);
    for i in 0..plane {
        for c in 0..img.planes {
            let v = img.data[c * plane + i].f64();
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 255.0) };
            out.push(v.round() as u8);
        }
    }
    Ok(out)
}

pub fn read_image<T: Real>(path: impl AsRef<Path>) -> Result<PlanarImage<T>> {
    decode(&fs::read(path)?)
}

pub fn write_image<T: Real>(path: impl AsRef<Path>, img: &PlanarImage<T>) -> Result<()> {
    fs::write(path, encode(img)?)?;
    Ok(())
}
