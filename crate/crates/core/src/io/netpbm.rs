//! Binary 8-bit PGM (`P5`) and PPM (`P6`).
//!
//! Samples are normalized to `[0, 1]` by dividing by 255; PPM channels stay in
//! R, G, B order as the grid's three dimensions.

use std::fs;
use std::path::Path;

use crate::error::{PimError, Result};
use crate::grid::SignalGrid;

fn parse_err(offset: usize, message: impl Into<String>) -> PimError {
    PimError::Parse {
        offset,
        message: message.into(),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    /// Skips whitespace and `#` comments.
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(parse_err(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, format!("{what} out of range")))
    }
}

/// Decodes a P5 or P6 image from memory.
pub fn parse_image(bytes: &[u8]) -> Result<SignalGrid> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(parse_err(0, "not a netpbm file (missing `P` magic)"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        d @ b'1'..=b'4' => {
            return Err(parse_err(
                0,
                format!(
                    "unsupported netpbm variant P{}: only binary P5/P6 are read",
                    d as char
                ),
            ))
        }
        _ => return Err(parse_err(0, "unknown netpbm magic number")),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = {
        h.skip_space();
        h.pos
    };
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(parse_err(
            2,
            format!("image dimensions must be positive, got {width}x{height}"),
        ));
    }
    if maxval != 255 {
        return Err(parse_err(
            maxval_at,
            format!("unsupported maxval {maxval}: only 8-bit (255) images are read"),
        ));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => {
            return Err(parse_err(
                h.pos,
                "expected a single whitespace byte after maxval",
            ))
        }
    }
    let need = width * height * channels;
    let data = &bytes[h.pos..];
    if data.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!(
                "truncated pixel data: expected {need} bytes, found {}",
                data.len()
            ),
        ));
    }
    let values = data[..need].iter().map(|&b| b as f64 / 255.0).collect();
    SignalGrid::new(height, width, channels, values)
}

/// Reads a P5 or P6 file.
pub fn load_image(path: impl AsRef<Path>) -> Result<SignalGrid> {
    parse_image(&fs::read(path)?)
}

/// Encodes a one- or three-channel grid, clamping to `[0, 1]` and rounding to
/// the nearest of 256 levels.
pub fn encode_image(grid: &SignalGrid) -> Result<Vec<u8>> {
    let magic = match grid.dim() {
        1 => "P5",
        3 => "P6",
        d => {
            return Err(PimError::InvalidInput(format!(
                "images need 1 or 3 channels, got {d}"
            )))
        }
    };
    let mut out = format!("{magic}\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(
        grid.values()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn save_image(path: impl AsRef<Path>, grid: &SignalGrid) -> Result<()> {
    fs::write(path, encode_image(grid)?)?;
    Ok(())
}

/// Writes a boolean mask as a PGM with values 0 and 255.
pub fn save_mask(path: impl AsRef<Path>, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let values = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    save_image(path, &SignalGrid::new(height, width, 1, values)?)
}
