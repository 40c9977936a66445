//! Binary PGM (P5) image I/O.
//!
//! The writer emits the exact canonical header `P5\n<w> <h>\n255\n`
//! followed by row-major bytes; the reader tolerates arbitrary whitespace
//! between header tokens and `#` comment lines.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// 8-bit grayscale image, row-major, top row first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer must match dimensions");
        GrayImage { width, height, pixels }
    }

    pub fn blank(width: usize, height: usize, value: u8) -> Self {
        GrayImage { width, height, pixels: vec![value; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

#[derive(Debug)]
pub enum PgmError {
    Io { path: PathBuf, source: io::Error },
    BadMagic { path: PathBuf, found: String },
    BadMaxval { path: PathBuf, maxval: u64 },
    Header { path: PathBuf, offset: usize, what: &'static str },
    Truncated { path: PathBuf, offset: usize, expected: usize, got: usize },
}

impl fmt::Display for PgmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PgmError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            PgmError::BadMagic { path, found } => {
                write!(f, "{}: not a binary PGM (magic {found:?}, want \"P5\")", path.display())
            }
            PgmError::BadMaxval { path, maxval } => {
                write!(f, "{}: unsupported maxval {maxval} (only 255)", path.display())
            }
            PgmError::Header { path, offset, what } => {
                write!(f, "{}: malformed header at byte {offset}: expected {what}", path.display())
            }
            PgmError::Truncated { path, offset, expected, got } => write!(
                f,
                "{}: truncated payload at byte {offset}: expected {expected} pixel bytes, found {got}",
                path.display()
            ),
        }
    }
}

impl std::error::Error for PgmError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            PgmError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_pgm(image: &GrayImage, path: &Path) -> Result<(), PgmError> {
    fs::write(path, encode_pgm(image)).map_err(|source| PgmError::Io { path: path.to_path_buf(), source })
}

/// Skips whitespace and `#` comment lines, returning the next token start.
fn skip_separators(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        return pos;
    }
}

fn read_number(bytes: &[u8], pos: usize, path: &Path, what: &'static str) -> Result<(u64, usize), PgmError> {
    let start = skip_separators(bytes, pos);
    let mut end = start;
    while end < bytes.len() && bytes[end].is_ascii_digit() {
        end += 1;
    }
    if end == start {
        return Err(PgmError::Header { path: path.to_path_buf(), offset: start, what });
    }
    let mut value: u64 = 0;
    for &b in &bytes[start..end] {
        value = value.saturating_mul(10).saturating_add((b - b'0') as u64);
    }
    Ok((value, end))
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(PgmError::BadMagic { path: path.to_path_buf(), found });
    }
    let (width, pos) = read_number(bytes, 2, path, "width")?;
    let (height, pos) = read_number(bytes, pos, path, "height")?;
    let (maxval, pos) = read_number(bytes, pos, path, "maxval")?;
    if maxval != 255 {
        return Err(PgmError::BadMaxval { path: path.to_path_buf(), maxval });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PgmError::Header { path: path.to_path_buf(), offset: pos, what: "single whitespace" });
    }
    let data_start = pos + 1;
    let expected = (width * height) as usize;
    let got = bytes.len() - data_start;
    if got < expected {
        return Err(PgmError::Truncated {
            path: path.to_path_buf(),
            offset: data_start + got,
            expected,
            got,
        });
    }
    Ok(GrayImage {
        width: width as usize,
        height: height as usize,
        pixels: bytes[data_start..data_start + expected].to_vec(),
    })
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, PgmError> {
    let bytes = fs::read(path).map_err(|source| PgmError::Io { path: path.to_path_buf(), source })?;
    decode_pgm(&bytes, path)
}
