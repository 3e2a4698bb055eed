//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use super::{IspError, Result, SrgbImage};

fn write(path: &Path, header: String, data: &[u8]) -> Result<()> {
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(data);
    fs::write(path, bytes).map_err(|source| IspError::Io { path: path.display().to_string(), source })
}

pub fn write_ppm(img: &SrgbImage, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), format!("P6\n{} {}\n255\n", img.width, img.height), &img.data)
}

/// Writes a grayscale image; `data` holds `width * height` bytes.
pub fn write_pgm(width: usize, height: usize, data: &[u8], path: impl AsRef<Path>) -> Result<()> {
    if data.len() != width * height {
        return Err(IspError::Pnm(format!("{} bytes for a {width}x{height} image", data.len())));
    }
    write(path.as_ref(), format!("P5\n{width} {height}\n255\n"), data)
}

/// Parses a P5 or P6 file. Returns (channels, width, height, data).
pub fn read_pnm(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| IspError::Io { path: path.display().to_string(), source })?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IspError::Pnm("truncated header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(IspError::Pnm(format!("unsupported magic {other}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| IspError::Pnm(format!("bad header field {s:?}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(IspError::Pnm(format!("maxval {maxval} unsupported")));
    }
    let data = bytes.get(pos..).unwrap_or_default().to_vec();
    if data.len() != channels * w * h {
        return Err(IspError::Pnm(format!("expected {} data bytes, found {}", channels * w * h, data.len())));
    }
    Ok((channels, w, h, data))
}
