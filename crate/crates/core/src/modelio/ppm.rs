//! Binary PPM (P6, maxval 255). Written headers are exactly
//! `P6\n<w> <h>\n255\n`; the reader also tolerates other whitespace and
//! `#` comments in the header.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use crate::wavelet::{ImagePlane, RgbImage};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_separators(&mut self) -> Result<()> {
        let start = self.pos;
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while let Some(&b) = self.bytes.get(self.pos) {
                        self.pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        if self.pos == start {
            return Err(self.err("expected whitespace"));
        }
        Ok(())
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Parse {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

pub fn parse_ppm<T: Scalar>(bytes: &[u8]) -> Result<RgbImage<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if !bytes.starts_with(b"P6") {
        return Err(c.err("missing P6 magic"));
    }
    c.pos = 2;
    c.skip_separators()?;
    let width = c.number("width")?;
    c.skip_separators()?;
    let height = c.number("height")?;
    c.skip_separators()?;
    let maxval_at = c.pos;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("maxval {maxval} unsupported, expected 255"),
        });
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace byte before pixel data")),
    }
    if width == 0 || height == 0 {
        return Err(c.err(format!("empty image {width}x{height}")));
    }
    let n = width * height;
    let data = &bytes[c.pos..];
    if data.len() < 3 * n {
        return Err(Error::Parse {
            offset: bytes.len(),
            message: format!("pixel data truncated: need {} bytes, found {}", 3 * n, data.len()),
        });
    }
    let scale = 1.0 / 255.0;
    let channel = |k: usize| -> Result<ImagePlane<T>> {
        ImagePlane::new(
            height,
            width,
            (0..n).map(|i| T::of(data[3 * i + k] as f64 * scale)).collect(),
        )
    };
    RgbImage::new(channel(0)?, channel(1)?, channel(2)?)
}

pub fn load_ppm<T: Scalar>(path: &Path) -> Result<RgbImage<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes)
}

/// Quantizes to 8 bits (round to nearest, clamped to [0, 1]).
pub fn encode_ppm<T: Scalar>(image: &RgbImage<T>) -> Vec<u8> {
    let (h, w) = image.dims();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let q = |v: T| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..h * w {
        out.push(q(image.r.values()[i]));
        out.push(q(image.g.values()[i]));
        out.push(q(image.b.values()[i]));
    }
    out
}

pub fn save_ppm<T: Scalar>(path: &Path, image: &RgbImage<T>) -> Result<()> {
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}
