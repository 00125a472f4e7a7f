use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelMatrix;
use crate::codec::{CodecError, FrozenCodec};
use crate::metrics::{self, MetricError, Nmse};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation needs {expected} aligned user datasets, got {got}")]
    Users { expected: usize, got: usize },
    #[error("user datasets must be non-empty and of equal length")]
    Alignment,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Held-out quality and feedback cost of one user branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEval {
    /// Feedback bits per entry: coded payload plus the λ code.
    pub rate_bits_per_entry: f64,
    pub payload_bits_per_entry: f64,
    /// Model cross-entropy of the quantized latents, bits per entry.
    pub estimated_entropy: f64,
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub rho: f64,
}

/// User-averaged metrics plus the per-user breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub samples: usize,
    pub rate_bits_per_entry: f64,
    pub payload_bits_per_entry: f64,
    pub estimated_entropy: f64,
    pub nmse_linear: f64,
    pub nmse_db: f64,
    pub rho: f64,
    pub per_user: Vec<UserEval>,
}

impl EvalResult {
    fn from_users(samples: usize, per_user: Vec<UserEval>) -> Self {
        let k = per_user.len() as f64;
        let avg = |f: fn(&UserEval) -> f64| per_user.iter().map(f).sum::<f64>() / k;
        let nmse = Nmse::from_linear(avg(|u| u.nmse_linear));
        Self {
            samples,
            rate_bits_per_entry: avg(|u| u.rate_bits_per_entry),
            payload_bits_per_entry: avg(|u| u.payload_bits_per_entry),
            estimated_entropy: avg(|u| u.estimated_entropy),
            nmse_linear: nmse.linear,
            nmse_db: nmse.db,
            rho: avg(|u| u.rho),
            per_user,
        }
    }
}

#[derive(Default)]
struct Accum {
    feedback_bits: f64,
    payload_bits: f64,
    estimated_bits: f64,
    nmse: f64,
    rho: f64,
}

/// Runs every sample through the real quantizer, range coder and decoder.
///
/// `data[k][n]` is user `k`'s channel in scene `n`; a `K`-user model decodes
/// the `K` streams of each scene jointly. Work proceeds in chunks of `chunk`
/// scenes so the reduction order is fixed.
pub fn evaluate(codec: &FrozenCodec, data: &[Vec<ChannelMatrix>], chunk: usize) -> Result<EvalResult, EvalError> {
    let k = codec.model().n_users();
    if data.len() != k {
        return Err(EvalError::Users {
            expected: k,
            got: data.len(),
        });
    }
    let count = data[0].len();
    if count == 0 || data.iter().any(|d| d.len() != count) {
        return Err(EvalError::Alignment);
    }
    let entries = (data[0][0].n_subcarriers() * data[0][0].n_antennas()) as f64;
    let mut acc: Vec<Accum> = (0..k).map(|_| Accum::default()).collect();
    for start in (0..count).step_by(chunk.max(1)) {
        let end = (start + chunk.max(1)).min(count);
        let mut streams = Vec::with_capacity(k);
        for (user, list) in data.iter().enumerate() {
            let refs: Vec<&ChannelMatrix> = list[start..end].iter().collect();
            let q = codec.quantized_latents(&refs, user)?;
            acc[user].estimated_bits += codec.estimated_bits(&q, user).iter().sum::<f64>();
            let s = codec.encode_latents(&q, user);
            for b in &s {
                acc[user].feedback_bits += b.feedback_bits() as f64;
                acc[user].payload_bits += b.payload.bit_len as f64;
            }
            streams.push(s);
        }
        let recon = codec.decompress(&streams)?;
        for (user, hats) in recon.iter().enumerate() {
            for (h, h_hat) in data[user][start..end].iter().zip(hats) {
                acc[user].nmse += metrics::nmse_sample(h, h_hat)?;
                acc[user].rho += metrics::rho_sample(h, h_hat)?;
            }
        }
    }
    let n = count as f64;
    let per_user = acc
        .iter()
        .map(|a| {
            let nmse = Nmse::from_linear(a.nmse / n);
            UserEval {
                rate_bits_per_entry: a.feedback_bits / n / entries,
                payload_bits_per_entry: a.payload_bits / n / entries,
                estimated_entropy: a.estimated_bits / n / entries,
                nmse_linear: nmse.linear,
                nmse_db: nmse.db,
                rho: a.rho / n,
            }
        })
        .collect();
    Ok(EvalResult::from_users(count, per_user))
}
