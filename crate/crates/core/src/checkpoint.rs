//! `DCMC` checkpoint files.
//!
//! ```text
//! "DCMC" | version u16 | meta_len u32 | meta (JSON)
//! n_params u32 | { name_len u16 | name | ndim u8 | dims u32… | f32… }
//! n_bn u32     | { name_len u16 | name | channels u32 | momentum f64 | eps f64 | mean f32… | var f32… }
//! ```
//!
//! All integers and floats are little-endian. The metadata carries the codec
//! configuration, the user count, the per-user λ values and the model id, which
//! is re-derived on load to detect corruption.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::BatchNormStats;
use crate::codec::{CodecConfig, CodecError, FrozenCodec, Model, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DCMC";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint model id {stored:#010x} does not match its contents ({computed:#010x})")]
    IdMismatch { stored: u32, computed: u32 },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: CodecConfig,
    n_users: usize,
    lambdas: Vec<f64>,
    model_id: u32,
}

/// A model together with the rate-distortion weights it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub lambdas: Vec<f64>,
}

/// 16-bit code of a λ value: its IEEE half-precision bit pattern.
pub fn lambda_code(lambda: f64) -> u16 {
    f16::from_f64(lambda).to_bits()
}

pub fn lambda_from_code(code: u16) -> f64 {
    f16::from_bits(code).to_f64()
}

impl Checkpoint {
    pub fn new(model: Model, lambdas: Vec<f64>) -> Result<Self, CheckpointError> {
        if lambdas.len() != model.n_users() {
            return Err(CodecError::UserCount {
                expected: model.n_users(),
                got: lambdas.len(),
            }
            .into());
        }
        Ok(Self { model, lambdas })
    }

    pub fn lambda_codes(&self) -> Vec<u16> {
        self.lambdas.iter().map(|&l| lambda_code(l)).collect()
    }

    pub fn freeze(&self) -> Result<FrozenCodec, CheckpointError> {
        Ok(FrozenCodec::new(self.model.clone(), self.lambda_codes())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut model = self.model.clone();
        model.round_to_f32();
        let meta = Meta {
            config: model.config.clone(),
            n_users: model.n_users(),
            lambdas: self.lambdas.clone(),
            model_id: model.fingerprint(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
        for (name, t) in model.params.iter() {
            put_name(&mut out, name);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        out.extend_from_slice(&(model.bn.len() as u32).to_le_bytes());
        for (name, s) in &model.bn {
            put_name(&mut out, name);
            out.extend_from_slice(&(s.mean.len() as u32).to_le_bytes());
            out.extend_from_slice(&s.momentum.to_le_bytes());
            out.extend_from_slice(&s.eps.to_le_bytes());
            put_f32s(&mut out, &s.mean);
            put_f32s(&mut out, &s.var);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Format("magic bytes are not DCMC".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)?;
        let mut params = ParamStore::default();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let len = len.ok_or_else(|| CheckpointError::Format(format!("{name} has an oversized shape")))?;
            let data = r.f32s(len)?;
            params.insert(name, Tensor::new(&shape, data).expect("length from shape"));
        }
        let mut bn = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.name()?;
            let channels = r.u32()? as usize;
            let momentum = r.f64()?;
            let eps = r.f64()?;
            let mean = r.f32s(channels)?;
            let var = r.f32s(channels)?;
            bn.insert(
                name,
                BatchNormStats {
                    mean,
                    var,
                    momentum,
                    eps,
                },
            );
        }
        if r.at != bytes.len() {
            return Err(CheckpointError::Format(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let model = Model::from_parts(meta.config, meta.n_users, params, bn)?;
        let computed = model.fingerprint();
        if computed != meta.model_id {
            return Err(CheckpointError::IdMismatch {
                stored: meta.model_id,
                computed,
            });
        }
        Checkpoint::new(model, meta.lambdas)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String, CheckpointError> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CheckpointError::Format("name is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}
