use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::contract(
                "GrayImage::new",
                format!("{} pixels for {width}×{height}", pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// `[H, W, 1]` tensor with values `v / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new(vec![self.height, self.width, 1], data).expect("extent checked at construction")
    }

    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(buf: &[u8]) -> Result<Self> {
        let bad = |reason: &str| Error::parse("pgm", reason);
        let mut pos = 0;
        let mut fields = [0usize; 3];
        if buf.get(..2) != Some(b"P5".as_slice()) {
            return Err(bad("missing P5 magic"));
        }
        pos += 2;
        for field in fields.iter_mut() {
            // whitespace and '#' comments may separate header fields
            loop {
                match buf.get(pos) {
                    Some(c) if c.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while buf.get(pos).is_some_and(|&c| c != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while buf.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&buf[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("malformed header"))?;
        }
        if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(bad("malformed header"));
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(bad(&format!("maxval {maxval} unsupported")));
        }
        let body = &buf[pos..];
        if body.len() != width * height {
            return Err(bad(&format!(
                "{} pixel bytes for {width}×{height}",
                body.len()
            )));
        }
        Self::new(width, height, body.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&buf).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::parse(path.display().to_string(), reason),
            other => other,
        })
    }
}
