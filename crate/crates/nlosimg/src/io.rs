//! Little-endian binary container shared by echo tensors and image grids:
//! an 8-byte tag, a fixed header, then interleaved f64 re/im samples.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContainerHeader {
    pub tag: [u8; 8],
    pub rows: u64,
    pub cols: u64,
    pub f0: f64,
    pub df: f64,
    pub seed: u64,
    pub aux: f64,
}

const HEADER_BYTES: usize = 8 + 8 * 6;

pub fn encode(header: &ContainerHeader, data: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + 16 * data.len());
    out.extend_from_slice(&header.tag);
    out.extend_from_slice(&header.rows.to_le_bytes());
    out.extend_from_slice(&header.cols.to_le_bytes());
    out.extend_from_slice(&header.f0.to_le_bytes());
    out.extend_from_slice(&header.df.to_le_bytes());
    out.extend_from_slice(&header.seed.to_le_bytes());
    out.extend_from_slice(&header.aux.to_le_bytes());
    for z in data {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

fn word(bytes: &[u8], i: usize) -> [u8; 8] {
    bytes[i..i + 8].try_into().expect("slice of eight bytes")
}

pub fn decode(bytes: &[u8], expected_tag: &[u8; 8]) -> Result<(ContainerHeader, Vec<Complex64>)> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format("file shorter than the header".into()));
    }
    let tag = word(bytes, 0);
    if &tag != expected_tag {
        return Err(Error::Format(format!(
            "unexpected tag {:?}",
            String::from_utf8_lossy(&tag)
        )));
    }
    let header = ContainerHeader {
        tag,
        rows: u64::from_le_bytes(word(bytes, 8)),
        cols: u64::from_le_bytes(word(bytes, 16)),
        f0: f64::from_le_bytes(word(bytes, 24)),
        df: f64::from_le_bytes(word(bytes, 32)),
        seed: u64::from_le_bytes(word(bytes, 40)),
        aux: f64::from_le_bytes(word(bytes, 48)),
    };
    let n = (header.rows as usize)
        .checked_mul(header.cols as usize)
        .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
    if bytes.len() != HEADER_BYTES + 16 * n {
        return Err(Error::Format(format!(
            "expected {} sample bytes, found {}",
            16 * n,
            bytes.len() - HEADER_BYTES
        )));
    }
    let data = bytes[HEADER_BYTES..]
        .chunks_exact(16)
        .map(|c| Complex64::new(f64::from_le_bytes(word(c, 0)), f64::from_le_bytes(word(c, 8))))
        .collect();
    Ok((header, data))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}
