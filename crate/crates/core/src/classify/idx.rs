//! IDX container parsing (the MNIST family's distribution format).

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// An unsigned-byte IDX array: big-endian extents and raw payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn count(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }
}

fn format(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, reason: reason.into() }
}

/// Parses an IDX byte stream, requiring `magic` (type byte 0x08, unsigned
/// bytes, followed by the dimension count).
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<IdxArray> {
    let word = |at: usize| -> Result<u32> {
        let b = bytes.get(at..at + 4).ok_or_else(|| format(at, "truncated header"))?;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    };
    let found = word(0)?;
    if found != magic {
        return Err(format(0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(word(4 + 4 * i)? as usize);
    }
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let available = bytes.len() - start;
    if available < len {
        return Err(format(bytes.len(), format!("payload truncated: {available} of {len} bytes")));
    }
    if available > len {
        return Err(format(start + len, format!("{} trailing bytes", available - len)));
    }
    Ok(IdxArray { dims, data: bytes[start..].to_vec() })
}

/// Reads a file, inflating it when it carries the gzip signature.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(path: &Path, magic: u32) -> Result<IdxArray> {
    parse_idx(&read_maybe_gz(path)?, magic)
}
