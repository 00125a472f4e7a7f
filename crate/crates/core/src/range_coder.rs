//! Static multi-symbol range coder over [`PmfTable`]s, plus the framed
//! feedback message.
//!
//! The coder is carry-less: a 64-bit `low`/`range` pair emits bytes once the
//! top byte of the interval is settled and, when the range underflows without
//! settling, shrinks it to the next 2⁴⁸ boundary instead of propagating a
//! carry. At the end only as many bits as are needed to pin down one value
//! inside the final interval are written, so `bit_len` is exact and the
//! decoder reads zeros past it.

use thiserror::Error;

use crate::entropy_model::{PmfTable, PMF_PRECISION, PMF_TOTAL};

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;

const MAGIC: &[u8; 4] = b"CMCB";
const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 2 + 3 * 2 + 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CoderError {
    #[error("not a feedback bitstream (bad magic)")]
    BadMagic,
    #[error("unsupported bitstream version {0}")]
    UnsupportedVersion(u8),
    #[error("bitstream truncated: need {expected} bytes, have {found}")]
    Truncated { expected: usize, found: usize },
    #[error("bitstream carries {trailing} bytes beyond its declared payload")]
    TrailingBytes { trailing: usize },
    #[error("bitstream was produced by model {found:#010x}, decoder holds {expected:#010x}")]
    ModelMismatch { expected: u32, found: u32 },
    #[error("payload does not decode under the given tables at symbol {0}")]
    Corrupt(usize),
    #[error("payload of {0} bits exceeds the 32-bit length field")]
    TooLong(usize),
}

/// Coded bytes and the exact number of meaningful bits in them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Payload {
    pub bytes: Vec<u8>,
    pub bit_len: u32,
}

struct Encoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    fn put(&mut self, cum: u32, freq: u32) {
        let r = self.range >> PMF_PRECISION;
        self.low += cum as u64 * r;
        self.range = r * freq as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    fn finish(mut self) -> Payload {
        let low = self.low as u128;
        let high = low + self.range as u128;
        let mut bits = 0u32;
        let value = loop {
            let unit = 1u128 << (64 - bits);
            let v = low.div_ceil(unit) * unit;
            if v < high {
                break v as u64;
            }
            bits += 1;
        };
        let tail_bytes = bits.div_ceil(8) as usize;
        self.out.extend_from_slice(&value.to_be_bytes()[..tail_bytes]);
        let bit_len = (self.out.len() - tail_bytes) * 8 + bits as usize;
        Payload {
            bytes: self.out,
            bit_len: bit_len as u32,
        }
    }
}

struct Decoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    payload: &'a [u8],
    bit_len: usize,
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(payload: &'a Payload) -> Self {
        let mut d = Self {
            low: 0,
            range: u64::MAX,
            code: 0,
            payload: &payload.bytes,
            bit_len: payload.bit_len as usize,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let start = self.pos * 8;
        self.pos += 1;
        if start >= self.bit_len {
            return 0;
        }
        let byte = self.payload.get(self.pos - 1).copied().unwrap_or(0);
        let valid = (self.bit_len - start).min(8);
        byte & (0xFFu16 << (8 - valid)) as u8
    }

    fn target(&mut self) -> Option<u32> {
        self.range >>= PMF_PRECISION;
        let v = self.code.wrapping_sub(self.low) / self.range;
        (v < PMF_TOTAL as u64).then_some(v as u32)
    }

    fn consume(&mut self, cum: u32, freq: u32) {
        self.low += cum as u64 * self.range;
        self.range *= freq as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}

/// Codes `symbols[i]` under `tables[i]`; out-of-support values take the
/// escape symbol followed by their raw 32 bits.
pub fn encode(symbols: &[i32], tables: &[&PmfTable]) -> Payload {
    assert_eq!(symbols.len(), tables.len(), "one table per symbol");
    let mut enc = Encoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        match t.index_of(s) {
            Some(i) => {
                let (c, f) = t.interval(i);
                enc.put(c, f);
            }
            None => {
                let (c, f) = t.interval(t.escape_index());
                enc.put(c, f);
                let raw = s as u32;
                enc.put(raw >> 16, 1);
                enc.put(raw & 0xFFFF, 1);
            }
        }
    }
    enc.finish()
}

/// Decodes `tables.len()` symbols.
pub fn decode(payload: &Payload, tables: &[&PmfTable]) -> Result<Vec<i32>, CoderError> {
    let needed = (payload.bit_len as usize).div_ceil(8);
    if payload.bytes.len() < needed {
        return Err(CoderError::Truncated {
            expected: needed,
            found: payload.bytes.len(),
        });
    }
    let mut dec = Decoder::new(payload);
    let mut out = Vec::with_capacity(tables.len());
    for (i, t) in tables.iter().enumerate() {
        let target = dec.target().ok_or(CoderError::Corrupt(i))?;
        let idx = t.find(target);
        let (c, f) = t.interval(idx);
        dec.consume(c, f);
        if idx == t.escape_index() {
            let mut raw = 0u32;
            for _ in 0..2 {
                let part = dec.target().ok_or(CoderError::Corrupt(i))?;
                dec.consume(part, 1);
                raw = (raw << 16) | part;
            }
            out.push(raw as i32);
        } else {
            out.push(t.symbol_at(idx));
        }
    }
    Ok(out)
}

/// `Σ −log₂ P(symbol)` under the fixed-point tables, escapes included.
pub fn cross_entropy_bits(symbols: &[i32], tables: &[&PmfTable]) -> f64 {
    symbols.iter().zip(tables).map(|(&s, t)| t.cost_bits(s)).sum()
}

/// Per-symbol table references for a `[C, H, W]` latent in row-major order.
pub fn latent_tables(tables: &[PmfTable], plane: usize) -> Vec<&PmfTable> {
    tables.iter().flat_map(|t| std::iter::repeat_n(t, plane)).collect()
}

/// Framed feedback message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub model_id: u32,
    pub lambda_code: u16,
    /// Latent `(C, H, W)`.
    pub shape: [u16; 3],
    pub payload: Payload,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.bytes.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.extend_from_slice(&self.lambda_code.to_le_bytes());
        for d in self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.payload.bit_len.to_le_bytes());
        out.extend_from_slice(&self.payload.bytes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CoderError> {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(CoderError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(CoderError::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[4] != VERSION {
            return Err(CoderError::UnsupportedVersion(bytes[4]));
        }
        let u16_at = |at: usize| u16::from_le_bytes([bytes[at], bytes[at + 1]]);
        let model_id = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes"));
        let lambda_code = u16_at(9);
        let shape = [u16_at(11), u16_at(13), u16_at(15)];
        let bit_len = u32::from_le_bytes(bytes[17..21].try_into().expect("4 bytes"));
        let needed = HEADER_LEN + (bit_len as usize).div_ceil(8);
        if bytes.len() < needed {
            return Err(CoderError::Truncated {
                expected: needed,
                found: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(CoderError::TrailingBytes {
                trailing: bytes.len() - needed,
            });
        }
        Ok(Self {
            model_id,
            lambda_code,
            shape,
            payload: Payload {
                bytes: bytes[HEADER_LEN..].to_vec(),
                bit_len,
            },
        })
    }

    /// Total feedback size: payload bits plus the 16-bit λ code.
    pub fn feedback_bits(&self) -> u64 {
        self.payload.bit_len as u64 + 16
    }

    /// Decodes the payload after checking it was produced by `model_id`.
    pub fn decode_symbols(&self, model_id: u32, tables: &[&PmfTable]) -> Result<Vec<i32>, CoderError> {
        if self.model_id != model_id {
            return Err(CoderError::ModelMismatch {
                expected: model_id,
                found: self.model_id,
            });
        }
        decode(&self.payload, tables)
    }
}

impl Payload {
    pub fn checked(bytes: Vec<u8>, bit_len: usize) -> Result<Self, CoderError> {
        let bit_len = u32::try_from(bit_len).map_err(|_| CoderError::TooLong(bit_len))?;
        Ok(Self { bytes, bit_len })
    }
}
