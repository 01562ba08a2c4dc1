//! Binary Netpbm codecs: P6 (RGB) input and P5 (grayscale) output.

use crate::error::{Error, Result};

/// A decoded 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
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
            .ok_or_else(|| Error::Data(format!("PPM: bad {what} at byte {start}")))
    }
}

/// Decodes a binary P6 image with maxval up to 65535, rescaled to 8 bits.
pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Data("PPM: missing P6 magic".into()));
    }
    let mut hdr = Header { bytes, pos: 2 };
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::Data(format!(
            "PPM: invalid header {width}x{height} maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    if hdr.pos >= bytes.len() || !bytes[hdr.pos].is_ascii_whitespace() {
        return Err(Error::Data("PPM: truncated header".into()));
    }
    let raster = &bytes[hdr.pos + 1..];
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let need = width * height * 3 * sample_bytes;
    if raster.len() < need {
        return Err(Error::Data(format!(
            "PPM: raster has {} bytes, need {need}",
            raster.len()
        )));
    }
    let pixels = if sample_bytes == 1 {
        if maxval == 255 {
            raster[..need].to_vec()
        } else {
            raster[..need]
                .iter()
                .map(|&v| ((v as u32 * 255 + maxval as u32 / 2) / maxval as u32) as u8)
                .collect()
        }
    } else {
        raster[..need]
            .chunks(2)
            .map(|p| {
                let v = u16::from_be_bytes([p[0], p[1]]) as u32;
                ((v * 255 + maxval as u32 / 2) / maxval as u32) as u8
            })
            .collect()
    };
    Ok(RgbImage {
        width,
        height,
        pixels,
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
