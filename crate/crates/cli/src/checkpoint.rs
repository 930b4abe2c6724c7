//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//! `"SPKDQNCK"`, `u32` version, `u64` header length, JSON header,
//! `u64` entry count, then per entry `u32` name length, name, `u8` dtype tag,
//! `u32` rank, `u64` extents, raw element bytes; finally a `u64` FNV-1a
//! digest of every preceding byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sparkdqn::scalar::DType;
use sparkdqn::state::{ArrayData, NamedArray, StateBundle};

use crate::CliError;

pub const MAGIC: &[u8; 8] = b"SPKDQNCK";
pub const VERSION: u32 = 1;

/// What a checkpoint restores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Rl,
    Classify,
}

/// A decoded checkpoint: run kind, effective configuration text and the
/// trainer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: String,
    pub state: StateBundle,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    kind: CheckpointKind,
    config: String,
    state: serde_json::Value,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn corrupt(why: impl Into<String>) -> CliError {
    CliError::Checkpoint(why.into())
}

fn put_array(out: &mut Vec<u8>, a: &NamedArray) {
    out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
    out.extend_from_slice(a.name.as_bytes());
    out.push(a.data.dtype().tag());
    out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
    for d in &a.shape {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    match &a.data {
        ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::U8(v) => out.extend_from_slice(v),
        ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>, CliError> {
    let header = FileHeader { kind: ck.kind, config: ck.config.clone(), state: ck.state.header.clone() };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(ck.state.arrays.len() as u64).to_le_bytes());
    for a in &ck.state.arrays {
        put_array(&mut out, a);
    }
    let digest = fnv1a64(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("entry overruns the payload at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CliError> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length does not fit in memory"))
    }

    fn array(&mut self) -> Result<NamedArray, CliError> {
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec()).map_err(|_| corrupt("array name is not UTF-8"))?;
        let tag = self.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| corrupt(format!("{name}: unknown dtype tag {tag}")))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>, _>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = count
            .and_then(|c| c.checked_mul(dtype.width()))
            .ok_or_else(|| corrupt(format!("{name}: extents overflow")))?;
        let raw = self.take(bytes)?;
        let data = match dtype {
            DType::F32 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => ArrayData::U8(raw.to_vec()),
            DType::U64 => ArrayData::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(NamedArray { name, shape, data })
    }
}

/// Decodes a checkpoint. The version is checked first, then the digest, so
/// a damaged file is rejected before anything is parsed.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CliError> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("format version {version} is not supported (expected {VERSION})")));
    }
    if bytes.len() < 12 + 8 {
        return Err(corrupt("digest mismatch: file truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(corrupt(format!("digest mismatch: stored {stored:016x}, computed {actual:016x}")));
    }
    let mut r = Reader { bytes: body, at: 12 };
    let header_len = r.len()?;
    let header: FileHeader = serde_json::from_slice(r.take(header_len)?).map_err(|e| corrupt(e.to_string()))?;
    let count = r.len()?;
    let mut arrays = Vec::new();
    for _ in 0..count {
        arrays.push(r.array()?);
    }
    if r.at != body.len() {
        return Err(corrupt(format!("{} unread bytes after the last entry", body.len() - r.at)));
    }
    Ok(Checkpoint { kind: header.kind, config: header.config, state: StateBundle { header: header.state, arrays } })
}

/// Writes through a temporary sibling and renames it into place.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    let bytes = encode(ck)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CliError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut state = StateBundle::new(&serde_json::json!({"frame": 12})).unwrap();
        state.push(NamedArray::new("w", &[2, 3], ArrayData::F32(vec![1.5, -0.0, f32::MIN_POSITIVE, 3.0, 4.0, 5.0])));
        state.push(NamedArray::flat("m", ArrayData::F64(vec![std::f64::consts::PI])));
        state.push(NamedArray::flat("b", ArrayData::U8(vec![0, 255])));
        state.push(NamedArray::flat("n", ArrayData::U64(vec![u64::MAX])));
        state.push(NamedArray::new("empty", &[0], ArrayData::F32(vec![])));
        Checkpoint { kind: CheckpointKind::Rl, config: "seed=1\n".into(), state }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = decode(&encode(&ck).unwrap()).unwrap();
        assert_eq!(back, ck);
        let ArrayData::F32(w) = &back.state.arrays[0].data else { panic!() };
        assert_eq!(w[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = encode(&sample()).unwrap();
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
    }

    #[test]
    fn flipped_bits_and_versions_are_rejected() {
        let bytes = encode(&sample()).unwrap();
        for at in (12..bytes.len()).step_by(7) {
            let mut b = bytes.clone();
            b[at] ^= 0x10;
            assert!(decode(&b).unwrap_err().to_string().contains("digest"), "byte {at}");
        }
        let mut b = bytes.clone();
        b[8] = 9;
        assert!(decode(&b).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn save_replaces_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save(&path, &sample()).unwrap();
        let mut second = sample();
        second.config = "seed=2\n".into();
        save(&path, &second).unwrap();
        assert_eq!(load(&path).unwrap(), second);
        assert!(!path.with_extension("tmp").exists());
    }
}
