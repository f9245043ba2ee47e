//! 8-bit binary PGM (P5) reading and writing.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Usage(format!(
            "pgm: {width}x{height} needs {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Returns `(width, height, pixels)`. Accepts `#` comments in the header.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Data(format!("{}: not a binary PGM (P5)", path.display())));
    }
    // header: three whitespace-separated fields after the magic
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data(format!("{}: malformed PGM header", path.display())));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Data(format!("{}: malformed PGM header", path.display())))?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Data(format!("{}: unsupported maxval {maxval}", path.display())));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if bytes.len() < pos + width * height {
        return Err(Error::Data(format!("{}: truncated PGM raster", path.display())));
    }
    Ok((width, height, bytes[pos..pos + width * height].to_vec()))
}
