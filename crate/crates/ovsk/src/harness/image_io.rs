//! Binary netpbm readers/writers. Writers emit the canonical header
//! `P6\n{w} {h}\n255\n` (P5 for graymaps) so identical pixels give identical
//! bytes.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, data: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(data.len() + 32);
    write!(out, "{magic}\n{w} {h}\n255\n")?;
    out.extend_from_slice(data);
    std::fs::write(path, out)?;
    Ok(())
}

/// 8-bit RGB, row-major, 3 bytes per pixel.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != 3 * w * h {
        return Err(Error::Format(format!("ppm payload {} bytes, expected {}", rgb.len(), 3 * w * h)));
    }
    write_netpbm(path, "P6", w, h, rgb)
}

/// 8-bit graymap; for label maps the byte is the class index.
pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Format(format!("pgm payload {} bytes, expected {}", gray.len(), w * h)));
    }
    write_netpbm(path, "P5", w, h, gray)
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("netpbm header: expected a number".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("netpbm header: bad number".into()))
    }
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(Error::Format(format!("{}: not a {magic} file", path.display())));
    }
    let mut p = HeaderParser { bytes: &bytes, pos: 2 };
    let w = p.number()?;
    let h = p.number()?;
    let maxval = p.number()?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    p.pos += 1;
    let need = w * h * channels;
    if bytes.len() < p.pos + need {
        return Err(Error::Format(format!(
            "{}: truncated payload ({} of {need} bytes)",
            path.display(),
            bytes.len().saturating_sub(p.pos)
        )));
    }
    Ok((w, h, bytes[p.pos..p.pos + need].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    read_netpbm(path, "P5", 1)
}
