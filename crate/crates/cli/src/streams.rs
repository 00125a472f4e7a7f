//! Container for a sequence of framed bitstreams: a `u32` count followed by
//! `u32` length-prefixed messages, little endian.

use std::fs;
use std::path::Path;

use anyhow::{ensure, Context, Result};

use deepcmc::range_coder::Bitstream;

pub fn write(path: &Path, streams: &[Bitstream]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&(streams.len() as u32).to_le_bytes());
    for s in streams {
        let bytes = s.to_bytes();
        out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<Vec<Bitstream>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut at = 0;
    let next_u32 = |at: &mut usize| -> Result<usize> {
        ensure!(*at + 4 <= bytes.len(), "{} is truncated", path.display());
        let v = u32::from_le_bytes(bytes[*at..*at + 4].try_into().expect("4 bytes"));
        *at += 4;
        Ok(v as usize)
    };
    let count = next_u32(&mut at)?;
    let mut streams = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = next_u32(&mut at)?;
        ensure!(at + len <= bytes.len(), "{} is truncated", path.display());
        streams.push(Bitstream::from_bytes(&bytes[at..at + len])?);
        at += len;
    }
    ensure!(at == bytes.len(), "{} has trailing bytes", path.display());
    Ok(streams)
}
