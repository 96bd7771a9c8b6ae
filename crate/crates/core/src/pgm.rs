//! Minimal Portable GrayMap support: binary `P5` out, `P5`/`P2` in.

use std::path::Path;

use crate::bintensor::RealTensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// `H × W × 1` tensor with values `p / 255`.
    pub fn to_tensor(&self) -> RealTensor {
        RealTensor::from_vec(
            self.height,
            self.width,
            1,
            self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )
        .expect("dims checked at construction")
    }

    /// Quantizes a single-channel tensor in [0, 1], rounding half up.
    pub fn from_unit_tensor(t: &RealTensor) -> Result<Self> {
        if t.channels() != 1 {
            return Err(Error::shape("grayscale images have one channel"));
        }
        let pixels = t.values().iter().map(|&v| unit_to_byte(v)).collect();
        Self::new(t.width(), t.height(), pixels)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Malformed(format!("PGM: {m}"));
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.token().ok_or_else(|| bad("missing magic"))?;
        let binary = match magic {
            b"P5" => true,
            b"P2" => false,
            _ => return Err(bad("not a P5 or P2 graymap")),
        };
        let mut header = [0usize; 3];
        for slot in header.iter_mut() {
            let tok = cur.token().ok_or_else(|| bad("truncated header"))?;
            *slot = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("non-numeric header field"))?;
        }
        let [width, height, maxval] = header;
        if maxval == 0 || maxval > 65535 {
            return Err(bad("maxval outside 1..=65535"));
        }
        let count = width * height;
        let raw: Vec<usize> = if binary {
            // Exactly one whitespace byte separates the header from the raster.
            let start = cur.pos + 1;
            let width_bytes = if maxval > 255 { 2 } else { 1 };
            let data = bytes
                .get(start..start + count * width_bytes)
                .ok_or_else(|| bad("raster shorter than header declares"))?;
            if width_bytes == 1 {
                data.iter().map(|&b| b as usize).collect()
            } else {
                data.chunks_exact(2)
                    .map(|p| ((p[0] as usize) << 8) | p[1] as usize)
                    .collect()
            }
        } else {
            (0..count)
                .map(|_| {
                    cur.token()
                        .and_then(|t| std::str::from_utf8(t).ok()?.parse().ok())
                        .ok_or_else(|| bad("bad ASCII raster"))
                })
                .collect::<Result<_>>()?
        };
        if raw.iter().any(|&v| v > maxval) {
            return Err(bad("sample exceeds maxval"));
        }
        let pixels = if maxval == 255 {
            raw.into_iter().map(|v| v as u8).collect()
        } else {
            raw.into_iter()
                .map(|v| ((v * 255 * 2 + maxval) / (2 * maxval)) as u8)
                .collect()
        };
        Self::new(width, height, pixels)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// `round_half_up(v · 255)` clamped to a byte.
pub fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let img = GrayImage::new(3, 2, vec![0, 10, 255, 128, 7, 32]).unwrap();
        let bytes = img.encode();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(GrayImage::decode(&bytes).unwrap(), img);
    }

    #[test]
    fn raster_may_start_with_whitespace_byte() {
        let img = GrayImage::new(2, 1, vec![b' ', b'\n']).unwrap();
        assert_eq!(GrayImage::decode(&img.encode()).unwrap(), img);
    }

    #[test]
    fn ascii_with_comments_and_rescale() {
        let text = b"P2\n# made by hand\n2 2\n# another\n15\n0 15\n7 8\n";
        let img = GrayImage::decode(text).unwrap();
        assert_eq!(img.pixels, vec![0, 255, 119, 136]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(GrayImage::decode(b"P6\n1 1\n255\n\0\0\0").is_err());
        assert!(GrayImage::decode(b"P5\n4 4\n255\n\0").is_err());
        assert!(GrayImage::decode(b"P2\n1 1\n3\n9\n").is_err());
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(unit_to_byte(0.5), 128);
        assert_eq!(unit_to_byte(1.0), 255);
        assert_eq!(unit_to_byte(-0.2), 0);
        assert_eq!(unit_to_byte(1.0 / 255.0), 1);
    }
}
