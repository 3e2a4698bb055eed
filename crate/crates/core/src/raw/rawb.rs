//! RAWB container: a flat little-endian dump of a [`BayerFrame`].
//!
//! ```text
//! "RAWB" | u16 version=1 | u32 width | u32 height | 4 ASCII CFA bytes
//!        | u16 bit_depth | u16 black | u16 white | width*height u16 samples
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{BayerFrame, CfaPattern, Levels, RawError, Result};

const MAGIC: &[u8; 4] = b"RAWB";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 2 + 2 + 2;

pub fn write_rawb<W: Write>(frame: &BayerFrame, mut out: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 2 * frame.samples().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(frame.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(frame.height() as u32).to_le_bytes());
    buf.extend_from_slice(frame.cfa().as_str().as_bytes());
    let levels = frame.levels();
    buf.extend_from_slice(&u16::from(levels.bit_depth).to_le_bytes());
    buf.extend_from_slice(&levels.black.to_le_bytes());
    buf.extend_from_slice(&levels.white.to_le_bytes());
    for &s in frame.samples() {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_rawb<R: Read>(mut input: R) -> Result<BayerFrame> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| RawError::Format(format!("read failed: {e}")))?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<BayerFrame> {
    if bytes.len() < HEADER_LEN {
        return Err(RawError::Format(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(RawError::Format("bad magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let version = u16_at(4);
    if version != VERSION {
        return Err(RawError::Format(format!("unsupported version {version}")));
    }
    let width = u32_at(6) as usize;
    let height = u32_at(10) as usize;
    let cfa_str = std::str::from_utf8(&bytes[14..18]).map_err(|_| RawError::Format("CFA is not ASCII".into()))?;
    let cfa: CfaPattern = cfa_str.parse()?;
    let bit_depth = u16_at(18);
    let bit_depth = u8::try_from(bit_depth).map_err(|_| RawError::BitDepth(u8::MAX))?;
    let levels = Levels::new(bit_depth, u16_at(20), u16_at(22))?;
    let n = width
        .checked_mul(height)
        .ok_or_else(|| RawError::Format("dimensions overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 2 * n {
        return Err(RawError::Format(format!("expected {} sample bytes, found {}", 2 * n, body.len())));
    }
    let samples = body.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    BayerFrame::new(width, height, cfa, levels, samples)
}

pub fn write_rawb_file(frame: &BayerFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| RawError::Io { path: path.display().to_string(), source };
    let file = fs::File::create(path).map_err(io_err)?;
    write_rawb(frame, std::io::BufWriter::new(file)).map_err(io_err)
}

pub fn read_rawb_file(path: impl AsRef<Path>) -> Result<BayerFrame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| RawError::Io { path: path.display().to_string(), source })?;
    parse(&bytes)
}
