//! Grayscale images and the binary PNM (`P5` / `P6`) codecs.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidParameter(format!(
                "image {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image { width, height, pixels }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Quarter turn: pixel `(x, y)` moves to `(height - 1 - y, x)`.
    pub fn rotate90(&self) -> Image {
        let (w, h) = (self.height, self.width);
        Image::from_fn(w, h, |x, y| self.at(y, self.height - 1 - x))
    }
}

fn perr(position: impl ToString, message: impl ToString) -> Error {
    Error::parse("PNM", position, message)
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn header_token(data: &[u8], pos: &mut usize) -> Result<u32> {
    loop {
        match data.get(*pos) {
            Some(b'#') => {
                while data.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(perr(format!("byte {pos}"), "truncated header")),
        }
    }
    let start = *pos;
    while data.get(*pos).is_some_and(|b| b.is_ascii_digit()) {
        *pos += 1;
    }
    std::str::from_utf8(&data[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| perr(format!("byte {start}"), "expected a decimal number"))
}

/// Decodes a binary PGM or PPM; color is converted with luma weights.
pub fn decode_pnm(data: &[u8]) -> Result<Image> {
    let channels = match data.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(perr("byte 0", "unsupported magic number (expected P5 or P6)")),
    };
    let mut pos = 2;
    let width = header_token(data, &mut pos)? as usize;
    let height = header_token(data, &mut pos)? as usize;
    let maxval = header_token(data, &mut pos)?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(perr(format!("byte {pos}"), format!("bad dimensions {width}x{height} or maxval {maxval}")));
    }
    if !data.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(perr(format!("byte {pos}"), "missing whitespace after maxval"));
    }
    pos += 1;
    let bytes_per = if maxval < 256 { 1 } else { 2 };
    let need = width * height * channels * bytes_per;
    if data.len() - pos < need {
        return Err(perr(
            format!("byte {}", data.len()),
            format!("truncated data: expected {need} bytes, found {}", data.len() - pos),
        ));
    }
    let body = &data[pos..pos + need];
    let sample = |i: usize| -> f64 {
        if bytes_per == 1 {
            body[i] as f64
        } else {
            u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64
        }
    };
    let scale = maxval as f64;
    let pixels = (0..width * height)
        .map(|p| {
            let v = if channels == 1 {
                sample(p)
            } else {
                0.299 * sample(3 * p) + 0.587 * sample(3 * p + 1) + 0.114 * sample(3 * p + 2)
            };
            (v / scale).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(Image { width, height, pixels })
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&data)
}

/// Encodes as 8-bit binary PGM.
pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn save_pgm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}
