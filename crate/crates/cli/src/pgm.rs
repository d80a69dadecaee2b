//! Binary greymap (P5) files with 8-bit samples.

use std::path::Path;

use deepmil::GrayImage;

use crate::error::{CliError, Result};
use crate::fsutil;

/// Encodes `image` as P5 with maxval 255.
pub fn encode(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width(), image.height()).into_bytes();
    out.extend_from_slice(image.pixels());
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments (which run to end of line).
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("expected {what} in header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("{what} out of range"))
    }
}

/// Decodes a P5 file. Samples with a maxval below 255 are rescaled to the
/// full 0..=255 range.
pub fn decode(bytes: &[u8]) -> Result<GrayImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if !(1..=255).contains(&maxval) {
        return Err(format!("maxval {maxval} unsupported (only 8-bit samples)"));
    }
    // exactly one whitespace byte separates the header from the raster
    if !h.bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let start = h.pos + 1;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| format!("image {width}x{height} too large"))?;
    let raster = bytes.get(start..start + n).ok_or_else(|| {
        format!(
            "raster truncated: expected {n} bytes, found {}",
            bytes.len().saturating_sub(start)
        )
    })?;
    let pixels = if maxval == 255 {
        raster.to_vec()
    } else {
        raster
            .iter()
            .map(|&v| {
                if usize::from(v) > maxval {
                    return Err(format!("sample {v} exceeds maxval {maxval}"));
                }
                Ok(((usize::from(v) * 255 + maxval / 2) / maxval) as u8)
            })
            .collect::<Result<_, _>>()?
    };
    GrayImage::new(width, height, pixels).map_err(|e| e.to_string())
}

pub fn read(path: &Path) -> Result<GrayImage> {
    let bytes = fsutil::read(path)?;
    decode(&bytes).map_err(|d| CliError::format(path, d))
}

pub fn write(path: &Path, image: &GrayImage) -> Result<()> {
    fsutil::write_atomic(path, &encode(image))
}
