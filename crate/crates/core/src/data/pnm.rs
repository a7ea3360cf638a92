//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit raster, interleaved row-major, 1 or 3 channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt_err(format!("bad or missing {what} in PNM header")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image8> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(fmt_err("not a binary PPM/PGM (expected P6 or P5)")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(fmt_err("PNM with zero width or height"));
    }
    if maxval != 255 {
        return Err(fmt_err(format!("maxval {maxval} unsupported (only 255)")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(fmt_err("missing whitespace after maxval")),
    }
    let need = width * height * channels;
    let raster = &bytes[h.pos..];
    if raster.len() < need {
        return Err(fmt_err(format!("raster has {} bytes, need {need}", raster.len())));
    }
    Ok(Image8 {
        width,
        height,
        channels,
        data: raster[..need].to_vec(),
    })
}

pub fn encode_pnm(img: &Image8) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_pnm(path: &Path) -> Result<Image8> {
    let bytes = fs::read(path)?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Format(m) => fmt_err(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_pnm(path: &Path, img: &Image8) -> Result<()> {
    fs::write(path, encode_pnm(img))?;
    Ok(())
}

/// `[C×H×W]` tensor with values `byte / 255`.
pub fn image_to_tensor(img: &Image8) -> Tensor {
    let (c, hw) = (img.channels, img.width * img.height);
    Tensor::from_fn(&[c, img.height, img.width], |i| {
        let (ch, p) = (i / hw, i % hw);
        img.data[p * c + ch] as f32 / 255.0
    })
}

/// Quantises a `[C×H×W]` tensor (C = 1 or 3) to bytes, `round(255·clamp(v))`.
pub fn tensor_to_image(t: &Tensor) -> Result<Image8> {
    let s = t.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(crate::error::shape_err!("expected [1|3, H, W], got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let mut data = vec![0u8; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            data[p * c + ch] = quantize(d[ch * h * w + p]);
        }
    }
    Ok(Image8 {
        width: w,
        height: h,
        channels: c,
        data,
    })
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
