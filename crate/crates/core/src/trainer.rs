//! Rate-distortion training.
//!
//! The loss for `K` users on a batch of `B` scenes is
//!
//! ```text
//! (1/B) Σ_b [ Σ_k bits_k(M̃_k) / (N_c N_t) + Σ_k λ_k ‖H_k − Ĥ_k‖² / (N_c N_t) ]
//! ```
//!
//! where `M̃_k` is the noise-relaxed latent and `bits_k` its negative log2
//! likelihood under user `k`'s entropy model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::ChannelMatrix;
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::codec::{batch_channels, CodecConfig, CodecError, Model};
use crate::harness::{evaluate, EvalError, EvalResult};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Abort when the loss exceeds this multiple of the first step's loss…
pub const DIVERGENCE_FACTOR: f64 = 1e3;
/// …for this many consecutive steps.
pub const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize, report: Box<TrainReport> },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    FromScratch,
    /// Start every branch from a single-user checkpoint, fusion kernels at zero.
    FineTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// One rate-distortion weight per user.
    pub lambdas: Vec<f64>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub scheme: Scheme,
    pub fine_tune_steps: usize,
    pub train_fraction: f64,
    /// Scenes per evaluation chunk.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![1.0],
            batch_size: 16,
            steps: 10_000,
            learning_rate: 1e-3,
            seed: 0,
            scheme: Scheme::FromScratch,
            fine_tune_steps: 1_000,
            train_fraction: 0.8,
            eval_chunk: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.lambdas.is_empty() || self.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return bad("every λ must be positive and finite");
        }
        if self.batch_size < 2 {
            return bad("batch norm needs a batch size of at least 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Loss value, its parts, and gradients aligned with the model's parameters.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    /// Per user, bits per entry averaged over the batch.
    pub rate_bits_per_entry: Vec<f64>,
    /// Per user, `‖H − Ĥ‖² / (N_c N_t)` averaged over the batch.
    pub mse: Vec<f64>,
    pub grads: Vec<Tensor>,
}

/// Distributed rate-distortion loss for aligned user batches `[B, 2, N_c, N_t]`.
pub fn loss_distributed(
    model: &mut Model,
    batches: &[Tensor],
    lambdas: &[f64],
    rng: &mut impl Rng,
) -> Result<LossEval, TrainError> {
    if lambdas.len() != batches.len() {
        return Err(TrainError::Config(format!(
            "{} λ values for {} user batches",
            lambdas.len(),
            batches.len()
        )));
    }
    let mut fwd = model.forward_train(batches, rng)?;
    let shape = batches[0].shape();
    let norm = (shape[0] * shape[2] * shape[3]) as f64;
    let mut terms = Vec::new();
    let mut mse = Vec::new();
    let mut rate = Vec::new();
    for (k, x) in batches.iter().enumerate() {
        let se = fwd.graph.squared_error(fwd.recon[k], x).map_err(CodecError::from)?;
        let v = fwd.graph.value(se).item() / norm;
        if !v.is_finite() {
            return Err(TrainError::NonFinite {
                term: format!("mse of user {k}"),
                step: 0,
            });
        }
        mse.push(v);
        terms.push((se, lambdas[k] / norm));
        if let Some(&r) = fwd.rate.get(k) {
            let v = fwd.graph.value(r).item() / norm;
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    term: format!("rate of user {k}"),
                    step: 0,
                });
            }
            rate.push(v);
            terms.push((r, 1.0 / norm));
        } else {
            rate.push(0.0);
        }
    }
    let loss = fwd.graph.weighted_sum(&terms).map_err(CodecError::from)?;
    let value = fwd.graph.value(loss).item();
    let mut grads = fwd.graph.backward(loss).map_err(CodecError::from)?;
    let grads = fwd.param_grads(&mut grads, &model.params);
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        return Err(TrainError::NonFinite {
            term: format!("gradient of {}", model.params.names()[i]),
            step: 0,
        });
    }
    Ok(LossEval {
        loss: value,
        rate_bits_per_entry: rate,
        mse,
        grads,
    })
}

/// Single-user rate-distortion loss.
pub fn loss_single(model: &mut Model, batch: &Tensor, lambda: f64, rng: &mut impl Rng) -> Result<LossEval, TrainError> {
    loss_distributed(model, std::slice::from_ref(batch), &[lambda], rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Summed over users.
    pub rate_bits_per_entry: f64,
    /// Averaged over users.
    pub mse: f64,
    pub total_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub lambdas: Vec<f64>,
    pub scheme: Scheme,
    pub steps_run: usize,
    pub train_samples: usize,
    pub held_out_samples: usize,
    pub history: Vec<StepRecord>,
    /// Eval-mode metrics on the held-out split with the real quantizer and coder.
    pub held_out: Option<EvalResult>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

/// Flags a run whose loss stays above [`DIVERGENCE_FACTOR`] times its first
/// value for [`DIVERGENCE_PATIENCE`] consecutive steps.
#[derive(Debug, Default, Clone)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    over: usize,
}

impl DivergenceGuard {
    /// Records one loss value; returns true once the run counts as diverged.
    pub fn observe(&mut self, loss: f64) -> bool {
        let first = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * first {
            self.over += 1;
        } else {
            self.over = 0;
        }
        self.over >= DIVERGENCE_PATIENCE
    }
}

/// Train / held-out split of aligned per-user datasets.
pub fn split(data: &[Vec<ChannelMatrix>], train_fraction: f64) -> (Vec<Vec<ChannelMatrix>>, Vec<Vec<ChannelMatrix>>) {
    let n = data.first().map_or(0, Vec::len);
    let mut n_train = (n as f64 * train_fraction).round() as usize;
    if n >= 2 && train_fraction < 1.0 {
        n_train = n_train.clamp(1, n - 1);
    }
    let n_train = n_train.min(n);
    let train = data.iter().map(|d| d[..n_train].to_vec()).collect();
    let held = data.iter().map(|d| d[n_train..].to_vec()).collect();
    (train, held)
}

fn check_data(data: &[Vec<ChannelMatrix>], users: usize) -> Result<(), TrainError> {
    if data.len() != users {
        return Err(TrainError::Config(format!("model has {users} users, data has {}", data.len())));
    }
    let n = data[0].len();
    if n == 0 || data.iter().any(|d| d.len() != n) {
        return Err(TrainError::Config("user datasets must be non-empty and aligned".into()));
    }
    Ok(())
}

/// Trains a fresh `K`-user model, `K = data.len()`.
pub fn train(codec: &CodecConfig, data: &[Vec<ChannelMatrix>], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(codec.clone(), data.len(), &mut init_rng)?;
    train_model(model, data, cfg, cfg.steps)
}

/// Builds a joint model from a single-user checkpoint and trains it for `fine_tune_steps`.
pub fn fine_tune(single: &Checkpoint, data: &[Vec<ChannelMatrix>], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let model = Model::from_single_user(&single.model, data.len())?;
    let cfg = TrainConfig {
        scheme: Scheme::FineTune,
        ..cfg.clone()
    };
    train_model(model, data, &cfg, cfg.fine_tune_steps)
}

/// Runs `steps` Adam updates on `model`, then evaluates on the held-out split.
pub fn train_model(
    mut model: Model,
    data: &[Vec<ChannelMatrix>],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let users = model.n_users();
    check_data(data, users)?;
    let lambdas = match cfg.lambdas.len() {
        1 => vec![cfg.lambdas[0]; users],
        n if n == users => cfg.lambdas.clone(),
        n => return Err(TrainError::Config(format!("{n} λ values for {users} users"))),
    };
    let (train_set, held_out) = split(data, cfg.train_fraction);
    let n_train = train_set[0].len();
    let mut report = TrainReport {
        lambdas: lambdas.clone(),
        scheme: cfg.scheme,
        steps_run: 0,
        train_samples: n_train,
        held_out_samples: held_out[0].len(),
        history: Vec::with_capacity(steps),
        held_out: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_7465);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut guard = DivergenceGuard::default();
    for step in 0..steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n_train)).collect();
        let batches = train_set
            .iter()
            .map(|d| batch_channels(&idx.iter().map(|&i| &d[i]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>, _>>()?;
        let eval = loss_distributed(&mut model, &batches, &lambdas, &mut rng).map_err(|e| match e {
            TrainError::NonFinite { term, .. } => TrainError::NonFinite { term, step },
            other => other,
        })?;
        report.history.push(StepRecord {
            step,
            rate_bits_per_entry: eval.rate_bits_per_entry.iter().sum(),
            mse: eval.mse.iter().sum::<f64>() / users as f64,
            total_loss: eval.loss,
        });
        report.steps_run = step + 1;
        if guard.observe(eval.loss) {
            return Err(TrainError::Diverged {
                step,
                report: Box::new(report),
            });
        }
        let grads: Vec<&Tensor> = eval.grads.iter().collect();
        adam.step(&mut model.params.values_mut(), &grads);
        if (step + 1) % 500 == 0 {
            log::info!(
                "step {}: loss {:.4} rate {:.4} mse {:.4}",
                step + 1,
                eval.loss,
                report.history[step].rate_bits_per_entry,
                report.history[step].mse
            );
        }
    }
    let checkpoint = Checkpoint::new(model, lambdas)?;
    if !held_out[0].is_empty() {
        let frozen = checkpoint.freeze()?;
        report.held_out = Some(evaluate(&frozen, &held_out, cfg.eval_chunk)?);
    }
    Ok(TrainOutcome { checkpoint, report })
}

/// One trained model per λ, sorted by λ.
pub fn rd_sweep(
    codec: &CodecConfig,
    data: &[Vec<ChannelMatrix>],
    lambdas: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<(f64, TrainOutcome)>, TrainError> {
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|lambda| {
            let cfg = TrainConfig {
                lambdas: vec![lambda],
                ..cfg.clone()
            };
            log::info!("training λ = {lambda}");
            train(codec, data, &cfg).map(|o| (lambda, o))
        })
        .collect()
}
