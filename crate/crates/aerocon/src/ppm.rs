//! Binary PPM (P6, maxval 255).

use std::path::Path;

use aerocon_core::augment::Image;

use crate::error::{self, AppError, Result};

/// `[0, 1]` → byte with round-half-up; out-of-range values saturate.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0
}

pub fn encode(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let planes = [img.plane(0), img.plane(1), img.plane(2)];
    for i in 0..h * w {
        for p in &planes {
            out.push(to_byte(p[i]));
        }
    }
    out
}

/// Why a byte stream is not a valid P6 image.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PpmError {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("maxval {0} is not supported (only 255)")]
    Maxval(usize),
    #[error("truncated payload: {got} of {expected} bytes")]
    Truncated { expected: usize, got: usize },
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, PpmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PpmError::Header(format!("expected {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Image, PpmError> {
    if !bytes.starts_with(b"P6") {
        return Err(PpmError::Header("missing P6 magic".into()));
    }
    let mut c = Cursor { bytes, pos: 2 };
    let w = c.number("width")?;
    let h = c.number("height")?;
    let maxval = c.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(PpmError::Header(format!("empty image {w}x{h}")));
    }
    if maxval != 255 {
        return Err(PpmError::Maxval(maxval));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(PpmError::Header("no whitespace after maxval".into())),
    }
    let expected = 3 * w * h;
    let payload = &bytes[c.pos..];
    if payload.len() < expected {
        return Err(PpmError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let mut data = vec![0.0; expected];
    for (i, px) in payload[..expected].chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * w * h + i] = from_byte(px[ch]);
        }
    }
    Ok(Image::new(h, w, data).expect("sized from header"))
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode(&error::read(path)?).map_err(|e| AppError::format(path, e.to_string()))
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    error::write(path, encode(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_pixel() {
        let img = Image::filled(1, 1, [1.0, 1.0, 1.0]);
        assert_eq!(encode(&img), b"P6\n1 1\n255\n\xff\xff\xff");
    }

    #[test]
    fn ramp_is_exact() {
        let data: Vec<f64> = (0..3 * 256).map(|i| from_byte((i % 256) as u8)).collect();
        let img = Image::new(16, 16, data).unwrap();
        let bytes = encode(&img);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(to_byte(0.5 / 255.0), 1);
        assert_eq!(to_byte(0.49 / 255.0), 0);
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(2.0), 255);
    }

    #[test]
    fn comments_are_skipped() {
        let img = decode(b"P6\n# made by hand\n1 1\n255\n\x00\x80\xff").unwrap();
        assert_eq!(img.get(2, 0, 0), 1.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(decode(b"P3\n1 1\n255\n"), Err(PpmError::Header(_))));
        assert!(matches!(decode(b"P6\n1 1\n65535\n\0\0\0"), Err(PpmError::Maxval(65535))));
        assert!(matches!(
            decode(b"P6\n2 1\n255\n\0\0\0"),
            Err(PpmError::Truncated { expected: 6, got: 3 })
        ));
        assert!(matches!(decode(b"P6\nx 1\n255\n"), Err(PpmError::Header(_))));
    }
}
