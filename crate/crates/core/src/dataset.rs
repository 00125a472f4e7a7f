//! `CSID` dataset files: a fixed header followed by little-endian `f32` samples.
//!
//! ```text
//! "CSID" | version u16 | N_c u32 | N_t u32 | count u32
//! count × N_c × N_t × (re f32, im f32)
//! [count × (x f32, y f32)]
//! ```
//!
//! The position block is optional; readers detect it from the file length.

use std::fs;
use std::io;
use std::path::Path;

use num_complex::Complex64;
use thiserror::Error;

use crate::channel::ChannelMatrix;

const MAGIC: &[u8; 4] = b"CSID";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad dataset header: {0}")]
    Header(String),
    #[error("matrix {index} is {got:?}, dataset shape is {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("dataset truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dataset dimension {0} does not fit the file format")]
    TooLarge(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Serializes `matrices` with positions. An empty list writes a header with zero shape.
pub fn encode_dataset(matrices: &[ChannelMatrix]) -> Result<Vec<u8>, DatasetError> {
    let (n_c, n_t) = matrices
        .first()
        .map(|m| (m.n_subcarriers(), m.n_antennas()))
        .unwrap_or((0, 0));
    for (index, m) in matrices.iter().enumerate() {
        let got = (m.n_subcarriers(), m.n_antennas());
        if got != (n_c, n_t) {
            return Err(DatasetError::ShapeMismatch {
                index,
                expected: (n_c, n_t),
                got,
            });
        }
    }
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| DatasetError::TooLarge(v));
    let mut out = Vec::with_capacity(HEADER_LEN + matrices.len() * (n_c * n_t * 8 + 8));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(n_c)?.to_le_bytes());
    out.extend_from_slice(&to_u32(n_t)?.to_le_bytes());
    out.extend_from_slice(&to_u32(matrices.len())?.to_le_bytes());
    for m in matrices {
        for z in m.data() {
            out.extend_from_slice(&(z.re as f32).to_le_bytes());
            out.extend_from_slice(&(z.im as f32).to_le_bytes());
        }
    }
    for m in matrices {
        out.extend_from_slice(&(m.position.0 as f32).to_le_bytes());
        out.extend_from_slice(&(m.position.1 as f32).to_le_bytes());
    }
    Ok(out)
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn le_f32(bytes: &[u8], at: usize) -> f64 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as f64
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<ChannelMatrix>, DatasetError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(DatasetError::Header("magic bytes are not CSID".into()));
        }
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(DatasetError::Header("magic bytes are not CSID".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DatasetError::Header(format!("unsupported version {version}")));
    }
    let n_c = le_u32(bytes, 6) as usize;
    let n_t = le_u32(bytes, 10) as usize;
    let count = le_u32(bytes, 14) as usize;
    if count > 0 && n_c * n_t == 0 {
        return Err(DatasetError::Header("non-empty dataset with zero-sized matrices".into()));
    }
    let body = count
        .checked_mul(n_c)
        .and_then(|v| v.checked_mul(n_t))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| DatasetError::Header("declared size overflows".into()))?;
    let bare = HEADER_LEN + body;
    let with_positions = bare + count * 8;
    let has_positions = match bytes.len() {
        n if n == bare => false,
        n if n == with_positions => true,
        n if n < bare => {
            return Err(DatasetError::Truncated {
                expected: bare,
                found: n,
            })
        }
        n => {
            return Err(DatasetError::Header(format!(
                "{n} bytes matches neither {bare} nor {with_positions} for the declared contents"
            )))
        }
    };
    let per = n_c * n_t;
    let mut matrices = Vec::with_capacity(count);
    for i in 0..count {
        let base = HEADER_LEN + i * per * 8;
        let data = (0..per)
            .map(|j| Complex64::new(le_f32(bytes, base + 8 * j), le_f32(bytes, base + 8 * j + 4)))
            .collect();
        let mut m = ChannelMatrix::new(n_c, n_t, data);
        if has_positions {
            let at = HEADER_LEN + body + 8 * i;
            m.position = (le_f32(bytes, at), le_f32(bytes, at + 4));
        }
        matrices.push(m);
    }
    Ok(matrices)
}

pub fn write_dataset(path: &Path, matrices: &[ChannelMatrix]) -> Result<(), DatasetError> {
    fs::write(path, encode_dataset(matrices)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ChannelMatrix>, DatasetError> {
    decode_dataset(&fs::read(path)?)
}

/// Rounds every entry and position to `f32`, the precision a dataset file stores.
pub fn round_to_storage(m: &mut ChannelMatrix) {
    for z in m.data_mut() {
        *z = Complex64::new(z.re as f32 as f64, z.im as f32 as f64);
    }
    m.position = (m.position.0 as f32 as f64, m.position.1 as f32 as f64);
}
