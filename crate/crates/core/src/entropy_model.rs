//! Factorized learned prior over latent channels.
//!
//! Each channel owns a monotone scalar function built from four stages of
//! small dense layers with filter widths `1 → 3 → 3 → 3 → 1`:
//!
//! ```text
//! x ← softplus(H_k) x + b_k
//! x ← x + tanh(a_k) ⊙ tanh(x)      (all but the last stage)
//! ```
//!
//! The sigmoid of the final value is the CDF. Softplus keeps every matrix
//! entry positive and `|tanh(a_k)| < 1` keeps each gate increasing, so the CDF
//! is monotone by construction. The 43 raw parameters of a channel live in one
//! row of a `[C, 43]` tensor.

use std::f64::consts::LN_2;

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOp, Graph, NodeId};
use crate::tensor::Tensor;

pub const PARAMS_PER_CHANNEL: usize = 43;
pub const LIKELIHOOD_BOUND: f64 = 5.421010862427522e-20; // 2^-64
pub const PMF_PRECISION: u32 = 16;
pub const PMF_TOTAL: u32 = 1 << PMF_PRECISION;
/// Probability mass allowed outside the table support, split between both tails.
pub const TAIL_MASS: f64 = 1e-6;

const INIT_SCALE: f64 = 10.0;
const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];

struct Stage {
    matrix: usize,
    bias: usize,
    factor: Option<usize>,
    d_in: usize,
    d_out: usize,
}

const STAGES: [Stage; 4] = [
    Stage { matrix: 0, bias: 3, factor: Some(6), d_in: 1, d_out: 3 },
    Stage { matrix: 9, bias: 18, factor: Some(21), d_in: 3, d_out: 3 },
    Stage { matrix: 24, bias: 33, factor: Some(36), d_in: 3, d_out: 3 },
    Stage { matrix: 39, bias: 42, factor: None, d_in: 3, d_out: 1 },
];

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("channel {channel}: support [{lo}, {hi}] exceeds the maximum width {max}")]
    SupportOverflow { channel: usize, lo: i64, hi: i64, max: usize },
    #[error("invalid frequency table: {0}")]
    InvalidTable(String),
    #[error("parameter tensor has shape {0:?}, expected [channels, 43]")]
    ParamShape(Vec<usize>),
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One channel's constrained parameters, precomputed for repeated evaluation.
struct Density<'a> {
    raw: &'a [f64],
    positive: [f64; PARAMS_PER_CHANNEL],
    gate: [f64; PARAMS_PER_CHANNEL],
}

#[derive(Default)]
struct Trace {
    inputs: [[f64; 3]; 4],
    pre: [[f64; 3]; 4],
}

impl<'a> Density<'a> {
    fn new(raw: &'a [f64]) -> Self {
        let mut positive = [0.0; PARAMS_PER_CHANNEL];
        let mut gate = [0.0; PARAMS_PER_CHANNEL];
        for s in &STAGES {
            for i in 0..s.d_in * s.d_out {
                positive[s.matrix + i] = softplus(raw[s.matrix + i]);
            }
            if let Some(f) = s.factor {
                for i in 0..s.d_out {
                    gate[f + i] = raw[f + i].tanh();
                }
            }
        }
        Self { raw, positive, gate }
    }

    fn logit(&self, x: f64, mut trace: Option<&mut Trace>) -> f64 {
        let mut v = [x, 0.0, 0.0];
        for (k, s) in STAGES.iter().enumerate() {
            let mut out = [0.0; 3];
            for (i, o) in out.iter_mut().enumerate().take(s.d_out) {
                let row = &self.positive[s.matrix + i * s.d_in..s.matrix + (i + 1) * s.d_in];
                *o = row.iter().zip(&v).map(|(m, x)| m * x).sum::<f64>() + self.raw[s.bias + i];
            }
            if let Some(t) = trace.as_deref_mut() {
                t.inputs[k] = v;
                t.pre[k] = out;
            }
            if let Some(f) = s.factor {
                for (i, o) in out.iter_mut().enumerate().take(s.d_out) {
                    *o += self.gate[f + i] * o.tanh();
                }
            }
            v = out;
        }
        v[0]
    }

    /// Propagates `grad` on the logit back to the input, accumulating parameter gradients.
    fn logit_backward(&self, trace: &Trace, grad: f64, param_grad: &mut [f64]) -> f64 {
        let mut g = [grad, 0.0, 0.0];
        for (k, s) in STAGES.iter().enumerate().rev() {
            let pre = &trace.pre[k];
            let mut g_pre = [0.0; 3];
            for i in 0..s.d_out {
                g_pre[i] = match s.factor {
                    Some(f) => {
                        let th = pre[i].tanh();
                        param_grad[f + i] += g[i] * th * (1.0 - self.gate[f + i] * self.gate[f + i]);
                        g[i] * (1.0 + self.gate[f + i] * (1.0 - th * th))
                    }
                    None => g[i],
                };
                param_grad[s.bias + i] += g_pre[i];
            }
            let v = &trace.inputs[k];
            let mut g_in = [0.0; 3];
            for i in 0..s.d_out {
                for j in 0..s.d_in {
                    let idx = s.matrix + i * s.d_in + j;
                    param_grad[idx] += g_pre[i] * v[j] * sigmoid(self.raw[idx]);
                    g_in[j] += self.positive[idx] * g_pre[i];
                }
            }
            g = g_in;
        }
        g[0]
    }

    /// Bin probability of `[x − ½, x + ½]`, evaluated on whichever tail keeps precision.
    fn likelihood(&self, x: f64) -> f64 {
        let lo = self.logit(x - 0.5, None);
        let up = self.logit(x + 0.5, None);
        let s = tail_sign(lo, up);
        (sigmoid(s * up) - sigmoid(s * lo)).abs()
    }

    /// Gradient of `−log₂ max(lik, bound)` scaled by `grad`; returns `(bits, d/dx)`.
    fn nll_with_grad(&self, x: f64, grad: f64, param_grad: &mut [f64]) -> (f64, f64) {
        let mut t_lo = Trace::default();
        let mut t_up = Trace::default();
        let lo = self.logit(x - 0.5, Some(&mut t_lo));
        let up = self.logit(x + 0.5, Some(&mut t_up));
        let s = tail_sign(lo, up);
        let (su, sl) = (sigmoid(s * up), sigmoid(s * lo));
        let diff = su - sl;
        let lik = diff.abs();
        let floor = lik.max(LIKELIHOOD_BOUND);
        let d_lik = -grad / (floor * LN_2);
        let sd = if diff < 0.0 { -1.0 } else { 1.0 };
        let g_up = d_lik * sd * s * su * (1.0 - su);
        let g_lo = -d_lik * sd * s * sl * (1.0 - sl);
        let gx = self.logit_backward(&t_up, g_up, param_grad) + self.logit_backward(&t_lo, g_lo, param_grad);
        (-floor.log2(), gx)
    }
}

fn tail_sign(lo: f64, up: f64) -> f64 {
    if lo + up > 0.0 {
        -1.0
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyModel {
    pub params: Tensor,
}

impl EntropyModel {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let scale = INIT_SCALE.powf(1.0 / (FILTERS.len() - 1) as f64);
        let mut params = Tensor::zeros(&[channels, PARAMS_PER_CHANNEL]);
        for row in params.data_mut().chunks_mut(PARAMS_PER_CHANNEL) {
            for (k, s) in STAGES.iter().enumerate() {
                let init = (1.0 / scale / FILTERS[k + 1] as f64).exp_m1().ln();
                row[s.matrix..s.matrix + s.d_in * s.d_out].fill(init);
                for b in &mut row[s.bias..s.bias + s.d_out] {
                    *b = rng.random_range(-0.5..0.5);
                }
            }
        }
        Self { params }
    }

    pub fn from_params(params: Tensor) -> Result<Self, EntropyError> {
        match params.shape() {
            [_, PARAMS_PER_CHANNEL] => Ok(Self { params }),
            s => Err(EntropyError::ParamShape(s.to_vec())),
        }
    }

    pub fn channels(&self) -> usize {
        self.params.shape()[0]
    }

    fn density(&self, channel: usize) -> Density<'_> {
        Density::new(&self.params.data()[channel * PARAMS_PER_CHANNEL..(channel + 1) * PARAMS_PER_CHANNEL])
    }

    pub fn cdf(&self, x: f64, channel: usize) -> f64 {
        sigmoid(self.density(channel).logit(x, None))
    }

    /// Upper tail `1 − cdf(x)` without cancellation.
    pub fn survival(&self, x: f64, channel: usize) -> f64 {
        sigmoid(-self.density(channel).logit(x, None))
    }

    pub fn pdf(&self, x: f64, channel: usize) -> f64 {
        let d = self.density(channel);
        let mut trace = Trace::default();
        let l = d.logit(x, Some(&mut trace));
        let mut scratch = [0.0; PARAMS_PER_CHANNEL];
        let slope = d.logit_backward(&trace, 1.0, &mut scratch);
        let s = sigmoid(l);
        s * (1.0 - s) * slope
    }

    /// Probability of the unit bin centred on `x`.
    pub fn likelihood(&self, x: f64, channel: usize) -> f64 {
        self.density(channel).likelihood(x)
    }

    /// `Σ −log₂ P` over a `[B, C, …]` or `[C, …]` latent, with the clamp at 2⁻⁶⁴.
    pub fn total_bits(&self, latent: &Tensor) -> f64 {
        let (batch, plane) = self.layout(latent.shape());
        let c = self.channels();
        let dens: Vec<Density> = (0..c).map(|ch| self.density(ch)).collect();
        let mut bits = 0.0;
        for n in 0..batch {
            for (ch, d) in dens.iter().enumerate() {
                let start = (n * c + ch) * plane;
                for &x in &latent.data()[start..start + plane] {
                    bits -= d.likelihood(x).max(LIKELIHOOD_BOUND).log2();
                }
            }
        }
        bits
    }

    fn layout(&self, shape: &[usize]) -> (usize, usize) {
        let c = self.channels();
        let total: usize = shape.iter().product();
        let (batch, plane) = match shape {
            [b, ch, rest @ ..] if *ch == c && shape.len() == 4 => (*b, rest.iter().product()),
            [ch, rest @ ..] if *ch == c => (1, rest.iter().product()),
            _ => panic!("latent shape {shape:?} does not carry {c} channels"),
        };
        assert_eq!(batch * c * plane, total);
        (batch, plane)
    }

    /// Adds the differentiable total rate in bits of `latent` to `graph`.
    pub fn rate_bits(graph: &mut Graph, latent: NodeId, params: NodeId) -> Result<NodeId, AutodiffError> {
        graph.custom(&[latent, params], Box::new(RateOp))
    }

    fn median(&self, channel: usize) -> f64 {
        let d = self.density(channel);
        let (mut lo, mut hi) = (-1.0, 1.0);
        while d.logit(lo, None) > 0.0 && lo > -1e12 {
            lo *= 2.0;
        }
        while d.logit(hi, None) < 0.0 && hi < 1e12 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if d.logit(mid, None) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Integer support holding all but [`TAIL_MASS`] of the channel's mass.
    pub fn support(&self, channel: usize, max_width: usize) -> Result<(i64, i64), EntropyError> {
        let center = self.median(channel).round().clamp(-1e15, 1e15) as i64;
        let half = TAIL_MASS / 2.0;
        let overflow = |lo: i64, hi: i64| EntropyError::SupportOverflow {
            channel,
            lo,
            hi,
            max: max_width,
        };
        let mut lo = center;
        while self.cdf(lo as f64 - 0.5, channel) > half {
            lo -= 1;
            if (center - lo) as usize >= max_width {
                return Err(overflow(lo, center));
            }
        }
        let mut hi = center;
        while self.survival(hi as f64 + 0.5, channel) > half {
            hi += 1;
            if (hi - lo + 1) as usize > max_width {
                return Err(overflow(lo, hi));
            }
        }
        if (hi - lo + 1) as usize > max_width {
            return Err(overflow(lo, hi));
        }
        Ok((lo, hi))
    }

    /// Bin probabilities on the support plus the escape (tail) mass.
    pub fn bin_probabilities(&self, channel: usize, lo: i64, hi: i64) -> (Vec<f64>, f64) {
        let d = self.density(channel);
        let probs = (lo..=hi).map(|n| d.likelihood(n as f64)).collect();
        let tail = self.cdf(lo as f64 - 0.5, channel) + self.survival(hi as f64 + 0.5, channel);
        (probs, tail)
    }

    /// Freezes every channel into a fixed-point coding table.
    pub fn discretize(&self, max_width: usize) -> Result<Vec<PmfTable>, EntropyError> {
        (0..self.channels())
            .map(|ch| {
                let (lo, hi) = self.support(ch, max_width)?;
                let (probs, tail) = self.bin_probabilities(ch, lo, hi);
                let offset = i32::try_from(lo)
                    .ok()
                    .filter(|_| i32::try_from(hi).is_ok())
                    .ok_or_else(|| EntropyError::InvalidTable(format!("support [{lo}, {hi}] exceeds i32")))?;
                PmfTable::from_probabilities(offset, &probs, tail)
            })
            .collect()
    }
}

struct RateOp;

impl RateOp {
    fn split<'t>(inputs: &[&'t Tensor]) -> (&'t Tensor, &'t Tensor, usize, usize, usize) {
        let (latent, params) = (inputs[0], inputs[1]);
        let c = params.shape()[0];
        let batch = latent.shape()[0];
        let plane = latent.len() / (batch * c);
        (latent, params, c, batch, plane)
    }
}

impl CustomOp for RateOp {
    fn name(&self) -> &'static str {
        "rate_bits"
    }

    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
        let (latent, params) = (inputs[0], inputs[1]);
        let bad = |detail: String| AutodiffError::Shape { op: "rate_bits", detail };
        if params.ndim() != 2 || params.shape()[1] != PARAMS_PER_CHANNEL {
            return Err(bad(format!("params {:?}", params.shape())));
        }
        if latent.ndim() != 4 || latent.shape()[1] != params.shape()[0] {
            return Err(bad(format!("latent {:?} vs params {:?}", latent.shape(), params.shape())));
        }
        let (_, _, c, batch, plane) = Self::split(inputs);
        let dens: Vec<Density> = params.data().chunks(PARAMS_PER_CHANNEL).map(Density::new).collect();
        let mut bits = 0.0;
        let mut clamped = 0usize;
        for n in 0..batch {
            for (ch, d) in dens.iter().enumerate() {
                let start = (n * c + ch) * plane;
                for &x in &latent.data()[start..start + plane] {
                    let lik = d.likelihood(x);
                    if lik < LIKELIHOOD_BOUND {
                        clamped += 1;
                    }
                    bits -= lik.max(LIKELIHOOD_BOUND).log2();
                }
            }
        }
        if clamped > 0 {
            log::warn!("{clamped} latent likelihoods clamped at 2^-64");
        }
        Ok(Tensor::scalar(bits))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>> {
        let (latent, params, c, batch, plane) = Self::split(inputs);
        let g = grad_output.item();
        let mut g_latent = Tensor::zeros(latent.shape());
        let mut g_params = Tensor::zeros(params.shape());
        let dens: Vec<Density> = params.data().chunks(PARAMS_PER_CHANNEL).map(Density::new).collect();
        for n in 0..batch {
            for (ch, d) in dens.iter().enumerate() {
                let start = (n * c + ch) * plane;
                let pg = &mut g_params.data_mut()[ch * PARAMS_PER_CHANNEL..(ch + 1) * PARAMS_PER_CHANNEL];
                for i in start..start + plane {
                    let (_, gx) = d.nll_with_grad(latent.data()[i], g, pg);
                    g_latent.data_mut()[i] = gx;
                }
            }
        }
        vec![Some(g_latent), Some(g_params)]
    }
}

/// Fixed-point coding table: in-support symbols `offset..offset+width` plus a
/// final escape symbol. Frequencies sum to exactly [`PMF_TOTAL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmfTable {
    offset: i32,
    freqs: Vec<u32>,
    cumulative: Vec<u32>,
}

impl PmfTable {
    /// Builds a table from explicit frequencies; the last entry is the escape symbol.
    pub fn from_frequencies(offset: i32, freqs: Vec<u32>) -> Result<Self, EntropyError> {
        if freqs.len() < 2 {
            return Err(EntropyError::InvalidTable("need at least one symbol plus escape".into()));
        }
        if freqs.contains(&0) {
            return Err(EntropyError::InvalidTable("zero frequency".into()));
        }
        let width = (freqs.len() - 1) as i64;
        if offset as i64 + width - 1 > i32::MAX as i64 {
            return Err(EntropyError::InvalidTable("support exceeds i32".into()));
        }
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cumulative.push(0);
        for &f in &freqs {
            acc += f as u64;
            if acc > PMF_TOTAL as u64 {
                break;
            }
            cumulative.push(acc as u32);
        }
        if acc != PMF_TOTAL as u64 {
            return Err(EntropyError::InvalidTable(format!("frequencies sum to {acc}, expected {PMF_TOTAL}")));
        }
        Ok(Self {
            offset,
            freqs,
            cumulative,
        })
    }

    /// Quantizes probabilities to [`PMF_PRECISION`] bits, keeping every symbol
    /// at one unit or more and each entry within one unit of its target where
    /// the budget allows.
    pub fn from_probabilities(offset: i32, probs: &[f64], escape: f64) -> Result<Self, EntropyError> {
        let mut p: Vec<f64> = probs.iter().copied().chain(std::iter::once(escape)).collect();
        if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(EntropyError::InvalidTable("probabilities must be finite and non-negative".into()));
        }
        if p.len() > PMF_TOTAL as usize {
            return Err(EntropyError::InvalidTable(format!("{} symbols exceed the fixed-point budget", p.len())));
        }
        let sum: f64 = p.iter().sum();
        if sum <= 0.0 {
            return Err(EntropyError::InvalidTable("probabilities sum to zero".into()));
        }
        p.iter_mut().for_each(|v| *v /= sum);
        let total = PMF_TOTAL as f64;
        let target: Vec<f64> = p.iter().map(|v| v * total).collect();
        let mut freqs: Vec<i64> = target.iter().map(|t| (t.round() as i64).max(1)).collect();
        let mut excess: i64 = freqs.iter().sum::<i64>() - PMF_TOTAL as i64;
        // Adjust the entries whose rounding error leaves the most room first.
        while excess != 0 {
            let mut order: Vec<usize> = (0..freqs.len()).collect();
            if excess > 0 {
                order.retain(|&i| freqs[i] > 1);
                order.sort_by(|&a, &b| {
                    (freqs[b] as f64 - target[b])
                        .total_cmp(&(freqs[a] as f64 - target[a]))
                        .then(a.cmp(&b))
                });
            } else {
                order.sort_by(|&a, &b| {
                    (target[b] - freqs[b] as f64)
                        .total_cmp(&(target[a] - freqs[a] as f64))
                        .then(a.cmp(&b))
                });
            }
            let step = excess.signum();
            for &i in order.iter().take(excess.unsigned_abs() as usize) {
                freqs[i] -= step;
                excess -= step;
            }
        }
        Self::from_frequencies(offset, freqs.into_iter().map(|f| f as u32).collect())
    }

    /// Smallest in-support symbol.
    pub fn offset(&self) -> i32 {
        self.offset
    }

    /// Number of in-support symbols (excluding escape).
    pub fn width(&self) -> usize {
        self.freqs.len() - 1
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn escape_index(&self) -> usize {
        self.freqs.len() - 1
    }

    /// Table index of `symbol`, or `None` when it must be escaped.
    pub fn index_of(&self, symbol: i32) -> Option<usize> {
        let rel = symbol as i64 - self.offset as i64;
        (0..self.width() as i64).contains(&rel).then_some(rel as usize)
    }

    pub fn symbol_at(&self, index: usize) -> i32 {
        (self.offset as i64 + index as i64) as i32
    }

    /// `(cumulative, frequency)` of table entry `index`.
    pub fn interval(&self, index: usize) -> (u32, u32) {
        (self.cumulative[index], self.freqs[index])
    }

    /// Table entry whose cumulative interval contains `target < PMF_TOTAL`.
    pub fn find(&self, target: u32) -> usize {
        self.cumulative.partition_point(|&c| c <= target) - 1
    }

    /// Ideal code length of `symbol` in bits, including the 32 raw escape bits.
    pub fn cost_bits(&self, symbol: i32) -> f64 {
        let bits = |f: u32| PMF_PRECISION as f64 - (f as f64).log2();
        match self.index_of(symbol) {
            Some(i) => bits(self.freqs[i]),
            None => bits(self.freqs[self.escape_index()]) + 32.0,
        }
    }
}
