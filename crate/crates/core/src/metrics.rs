//! Reconstruction quality: normalized MSE and per-subcarrier cosine correlation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelMatrix;

/// Floor for reported dB values, reached only by exact reconstructions.
pub const DB_FLOOR: f64 = -100.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("reference matrix {0} has zero norm")]
    ZeroNorm(usize),
    #[error("matrix {sample} has a zero-norm row {row}")]
    ZeroRow { sample: usize, row: usize },
    #[error("matrix {0} differs in shape from its reconstruction")]
    ShapeMismatch(usize),
    #[error("no samples to average")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nmse {
    pub linear: f64,
    pub db: f64,
}

impl Nmse {
    pub fn from_linear(linear: f64) -> Self {
        Self {
            linear,
            db: to_db(linear),
        }
    }
}

pub fn to_db(linear: f64) -> f64 {
    if linear <= 0.0 {
        return DB_FLOOR;
    }
    (10.0 * linear.log10()).max(DB_FLOOR)
}

fn check_pair(index: usize, h: &ChannelMatrix, h_hat: &ChannelMatrix) -> Result<(), MetricError> {
    if (h.n_subcarriers(), h.n_antennas()) != (h_hat.n_subcarriers(), h_hat.n_antennas()) {
        return Err(MetricError::ShapeMismatch(index));
    }
    Ok(())
}

/// `‖H − Ĥ‖² / ‖H‖²` for one sample.
pub fn nmse_sample(h: &ChannelMatrix, h_hat: &ChannelMatrix) -> Result<f64, MetricError> {
    check_pair(0, h, h_hat)?;
    let reference = h.frobenius_sq();
    if reference == 0.0 {
        return Err(MetricError::ZeroNorm(0));
    }
    let err: f64 = h.data().iter().zip(h_hat.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(err / reference)
}

/// Mean of per-sample ratios over the dataset.
pub fn nmse(hs: &[ChannelMatrix], hats: &[ChannelMatrix]) -> Result<Nmse, MetricError> {
    let ratios = per_sample(hs, hats, nmse_sample)?;
    Ok(Nmse::from_linear(mean(&ratios)?))
}

/// `(1/N_c) Σ_n |ĥ_nᴴ h_n| / (‖ĥ_n‖ ‖h_n‖)` for one sample.
pub fn rho_sample(h: &ChannelMatrix, h_hat: &ChannelMatrix) -> Result<f64, MetricError> {
    check_pair(0, h, h_hat)?;
    let mut total = 0.0;
    for n in 0..h.n_subcarriers() {
        let (a, b) = (h.row(n), h_hat.row(n));
        let na: f64 = a.iter().map(|z| z.norm_sqr()).sum();
        let nb: f64 = b.iter().map(|z| z.norm_sqr()).sum();
        if na == 0.0 || nb == 0.0 {
            return Err(MetricError::ZeroRow { sample: 0, row: n });
        }
        let inner: num_complex::Complex64 = a.iter().zip(b).map(|(x, y)| y.conj() * x).sum();
        total += inner.norm() / (na.sqrt() * nb.sqrt());
    }
    Ok(total / h.n_subcarriers() as f64)
}

pub fn rho(hs: &[ChannelMatrix], hats: &[ChannelMatrix]) -> Result<f64, MetricError> {
    mean(&per_sample(hs, hats, rho_sample)?)
}

fn per_sample(
    hs: &[ChannelMatrix],
    hats: &[ChannelMatrix],
    f: fn(&ChannelMatrix, &ChannelMatrix) -> Result<f64, MetricError>,
) -> Result<Vec<f64>, MetricError> {
    if hs.len() != hats.len() {
        return Err(MetricError::ShapeMismatch(hs.len().min(hats.len())));
    }
    hs.iter()
        .zip(hats)
        .enumerate()
        .map(|(i, (h, g))| {
            f(h, g).map_err(|e| match e {
                MetricError::ZeroNorm(_) => MetricError::ZeroNorm(i),
                MetricError::ZeroRow { row, .. } => MetricError::ZeroRow { sample: i, row },
                MetricError::ShapeMismatch(_) => MetricError::ShapeMismatch(i),
                other => other,
            })
        })
        .collect()
}

fn mean(values: &[f64]) -> Result<f64, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
