//! FRWT weight container: a flat binary checkpoint of named float64 arrays.
//!
//! Layout (little-endian): magic "FRWT", u32 version, u32 entry count, then
//! per entry: u16 name length, name bytes, u8 rank, u32 extents, f64
//! payload. Entries are ordered lexicographically by name, so a checkpoint
//! written from the same state is byte-identical.

use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

const MAGIC: &[u8; 4] = b"FRWT";
const VERSION: u32 = 1;

pub type Entry = (String, Vec<usize>, Vec<f64>);

pub fn serialize_entries(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&Entry> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(sorted.len() as u32).to_le_bytes());
    for (name, shape, data) in sorted {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Content(format!(
                "entry '{}': shape {:?} does not cover {} values",
                name,
                shape,
                data.len()
            )));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Content(format!("entry name too long: '{name}'")));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save(entries: &[Entry], path: &Path) -> Result<()> {
    std::fs::write(path, serialize_entries(entries)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("FRWT payload truncated".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Format("bad FRWT magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported FRWT version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after FRWT entries".into()));
    }
    Ok(entries)
}
