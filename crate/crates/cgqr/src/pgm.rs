//! Minimal binary PGM/PPM reading and writing (8-bit, P5/P6).
//!
//! All writes go through a temp-file-then-rename path so partially written
//! images are never visible under their final name.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{CgqrError, Result};

/// Atomically write `bytes` to `path` (write temp file in the same
/// directory, then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_pgm(path: &Path, img: &Array2<u8>) -> Result<()> {
    let (h, w) = img.dim();
    let mut buf = Vec::with_capacity(h * w + 32);
    buf.extend_from_slice(format!("P5\n{} {}\n255\n", w, h).as_bytes());
    for v in img.iter() {
        buf.push(*v);
    }
    atomic_write(path, &buf)
}

/// Write an RGB image stored as (3, H, W).
pub fn write_ppm(path: &Path, img: &Array3<u8>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(CgqrError::Shape(format!("ppm expects 3 channels, got {c}")));
    }
    let mut buf = Vec::with_capacity(3 * h * w + 32);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", w, h).as_bytes());
    for y in 0..h {
        for x in 0..w {
            buf.push(img[[0, y, x]]);
            buf.push(img[[1, y, x]]);
            buf.push(img[[2, y, x]]);
        }
    }
    atomic_write(path, &buf)
}

pub fn read_pgm(path: &Path) -> Result<Array2<u8>> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|e| CgqrError::Data(format!("{}: {e}", path.display())))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Array2<u8>, String> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or("missing magic")?;
    if magic != b"P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let w: usize = parse_num(next_token(bytes, &mut pos).ok_or("missing width")?)?;
    let h: usize = parse_num(next_token(bytes, &mut pos).ok_or("missing height")?)?;
    let maxval: usize = parse_num(next_token(bytes, &mut pos).ok_or("missing maxval")?)?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // single whitespace byte after maxval
    pos += 1;
    if bytes.len() < pos + w * h {
        return Err("truncated pixel data".into());
    }
    let data = bytes[pos..pos + w * h].to_vec();
    Array2::from_shape_vec((h, w), data).map_err(|e| e.to_string())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    // skip whitespace and comment lines
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(&bytes[start..*pos])
    } else {
        None
    }
}

fn parse_num(tok: &[u8]) -> std::result::Result<usize, String> {
    std::str::from_utf8(tok)
        .map_err(|e| e.to_string())?
        .parse()
        .map_err(|e: std::num::ParseIntError| e.to_string())
}
