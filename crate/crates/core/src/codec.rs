//! Convolutional CSI autoencoder: feature encoder, residual feature decoder,
//! the multi-user joint decoder with summation fusion, and the frozen
//! compress/decompress pipeline around the range coder.
//!
//! Encoder: three strided convolutions (9×9 ↓4, 5×5 ↓2, 5×5 ↓2 by default),
//! the first two followed by batch norm and PReLU. Decoder: upsample + conv,
//! a stack of residual blocks wrapped in an outer identity shortcut, then two
//! more upsample + conv stages ending in a linear two-channel output.
//!
//! A model holds `K ≥ 1` user branches, each with its own encoder, entropy
//! model and decoder. With `K > 1`, after selected residual blocks every
//! branch adds `Σ_{j≠k} conv3×3_{j→k}(f_j)` of the other branches' features.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchNormStats, Gradients, Graph, NodeId};
use crate::channel::ChannelMatrix;
use crate::entropy_model::{EntropyError, EntropyModel, PmfTable, PMF_TOTAL};
use crate::range_coder::{self, Bitstream, CoderError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid codec configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("model has {expected} user branches, got {got} inputs")]
    UserCount { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Coder(#[from] CoderError),
}

type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampling {
    /// Nearest-neighbour replication followed by a convolution.
    NearestConv,
    Transposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    ConvBnPrelu,
    ConvPreluBn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `U[−½, ½)`, matching round-to-nearest.
    Centered,
    /// `U[0, 1)`.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub base_channels: usize,
    pub encoder_kernels: [usize; 3],
    pub downsample: [usize; 3],
    pub n_residual_blocks: usize,
    pub residual_kernel: usize,
    pub upsampling: Upsampling,
    pub block_order: BlockOrder,
    /// Batch norm after the decoder's non-residual convolutions.
    pub decoder_plain_bn: bool,
    /// When off, latents are sent with a fixed-length 8-bit code and training ignores rate.
    pub entropy_coding: bool,
    pub noise: NoiseModel,
    /// 1-based residual block indices followed by a fusion stage.
    pub fusion_after_blocks: Vec<usize>,
    pub fusion_kernel: usize,
    pub max_support_width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            encoder_kernels: [9, 5, 5],
            downsample: [4, 2, 2],
            n_residual_blocks: 2,
            residual_kernel: 3,
            upsampling: Upsampling::NearestConv,
            block_order: BlockOrder::ConvBnPrelu,
            decoder_plain_bn: true,
            entropy_coding: true,
            noise: NoiseModel::Centered,
            fusion_after_blocks: vec![1, 2],
            fusion_kernel: 3,
            max_support_width: 4096,
        }
    }
}

impl CodecConfig {
    pub fn total_downsample(&self) -> usize {
        self.downsample.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CodecError::Config(m.into()));
        if self.base_channels == 0 {
            return bad("base_channels must be positive");
        }
        if self.downsample.iter().any(|f| ![1, 2, 4].contains(f)) {
            return bad("downsample factors must be 1, 2 or 4");
        }
        if self.upsampling == Upsampling::Transposed && self.downsample.contains(&1) {
            return bad("transposed upsampling needs factors of 2 or 4");
        }
        if self
            .encoder_kernels
            .iter()
            .chain([&self.residual_kernel, &self.fusion_kernel])
            .any(|k| k % 2 == 0)
        {
            return bad("kernel sizes must be odd");
        }
        if self.fusion_after_blocks.iter().any(|&b| b == 0 || b > self.n_residual_blocks) {
            return bad("fusion positions must name existing residual blocks");
        }
        if self.max_support_width == 0 || self.max_support_width >= PMF_TOTAL as usize {
            return bad("max_support_width must lie in 1..65536");
        }
        Ok(())
    }

    /// Latent `(C, H, W)` for an `n_c × n_t` channel.
    pub fn latent_shape(&self, n_c: usize, n_t: usize) -> Result<[usize; 3]> {
        let f = self.total_downsample();
        if n_c == 0 || n_t == 0 || n_c % f != 0 || n_t % f != 0 {
            return Err(CodecError::Shape(format!(
                "{n_c}x{n_t} input is not a multiple of the total downsample factor {f}"
            )));
        }
        Ok([self.base_channels, n_c / f, n_t / f])
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor> {
        self.values.iter_mut().collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Real tensor `[2, N_c, N_t]` holding the real and imaginary parts.
pub fn split_complex(h: &ChannelMatrix) -> Tensor {
    let plane = h.data().len();
    let mut out = vec![0.0; 2 * plane];
    for (i, z) in h.data().iter().enumerate() {
        out[i] = z.re;
        out[plane + i] = z.im;
    }
    Tensor::new(&[2, h.n_subcarriers(), h.n_antennas()], out).expect("two planes")
}

/// Inverse of [`split_complex`] for a `[2, N_c, N_t]` slice.
pub fn merge_complex(data: &[f64], n_c: usize, n_t: usize) -> ChannelMatrix {
    let plane = n_c * n_t;
    assert_eq!(data.len(), 2 * plane);
    let values = (0..plane).map(|i| Complex64::new(data[i], data[plane + i])).collect();
    ChannelMatrix::new(n_c, n_t, values)
}

/// Stacks channel matrices into a `[B, 2, N_c, N_t]` batch.
pub fn batch_channels(hs: &[&ChannelMatrix]) -> Result<Tensor> {
    let first = hs.first().ok_or_else(|| CodecError::Shape("empty batch".into()))?;
    let (n_c, n_t) = (first.n_subcarriers(), first.n_antennas());
    let mut data = Vec::with_capacity(hs.len() * 2 * n_c * n_t);
    for h in hs {
        if (h.n_subcarriers(), h.n_antennas()) != (n_c, n_t) {
            return Err(CodecError::Shape("batch mixes channel shapes".into()));
        }
        data.extend_from_slice(split_complex(h).data());
    }
    Ok(Tensor::new(&[hs.len(), 2, n_c, n_t], data).expect("consistent batch"))
}

/// Splits a `[B, 2, N_c, N_t]` tensor back into channel matrices.
pub fn unbatch_channels(t: &Tensor) -> Vec<ChannelMatrix> {
    let [b, _, n_c, n_t] = t.shape().try_into().expect("rank-4 reconstruction");
    (0..b).map(|n| merge_complex(t.outer(n), n_c, n_t)).collect()
}

/// Round half away from zero, saturating at the `i32` range the coder carries.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| if v.is_nan() { 0.0 } else { v.round().clamp(i32::MIN as f64, i32::MAX as f64) })
}

pub fn add_noise(t: &Tensor, noise: NoiseModel, rng: &mut impl Rng) -> Tensor {
    let (lo, hi) = match noise {
        NoiseModel::Centered => (-0.5, 0.5),
        NoiseModel::Unit => (0.0, 1.0),
    };
    let data = t.data().iter().map(|v| v + rng.random_range(lo..hi)).collect();
    Tensor::new(t.shape(), data).expect("same shape")
}

fn user_prefix(user: usize) -> String {
    format!("u{user}")
}

fn fusion_name(stage: usize, from: usize, to: usize) -> String {
    format!("fuse{stage}.{from}to{to}")
}

/// Uniform `U(−1/√fan_in, 1/√fan_in)`, the common default for conv layers.
fn conv_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: CodecConfig,
    n_users: usize,
    pub params: ParamStore,
    pub bn: BTreeMap<String, BatchNormStats>,
}

struct LayerSpec {
    name: String,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    transposed: bool,
    bn: bool,
    prelu: bool,
}

impl Model {
    /// Freshly initialized model with `n_users` branches.
    pub fn new(config: CodecConfig, n_users: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if n_users == 0 {
            return Err(CodecError::Config("need at least one user branch".into()));
        }
        let mut model = Self {
            config,
            n_users,
            params: ParamStore::default(),
            bn: BTreeMap::new(),
        };
        for user in 0..n_users {
            for spec in model.layer_specs(user) {
                model.add_layer(&spec, rng);
            }
            let c = model.config.base_channels;
            model
                .params
                .insert(format!("{}.entropy", user_prefix(user)), EntropyModel::new(c, rng).params);
        }
        if n_users > 1 {
            let c = model.config.base_channels;
            let k = model.config.fusion_kernel;
            for stage in 0..model.config.fusion_after_blocks.len() {
                for to in 0..n_users {
                    for from in (0..n_users).filter(|&j| j != to) {
                        model
                            .params
                            .insert(fusion_name(stage, from, to), conv_init(&[c, c, k, k], c * k * k, rng));
                    }
                }
            }
        }
        Ok(model)
    }

    /// Joint model whose branches copy `single`'s weights, with zero fusion kernels.
    pub fn from_single_user(single: &Model, n_users: usize) -> Result<Self> {
        if single.n_users != 1 {
            return Err(CodecError::Config("source model must have exactly one branch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut joint = Model::new(single.config.clone(), n_users, &mut rng)?;
        let src = user_prefix(0);
        for user in 0..n_users {
            let dst = user_prefix(user);
            for (name, value) in single.params.iter() {
                let target = name.replacen(&src, &dst, 1);
                joint.params.insert(target, value.clone());
            }
            for (name, stats) in &single.bn {
                joint.bn.insert(name.replacen(&src, &dst, 1), stats.clone());
            }
        }
        joint.zero_fusion();
        Ok(joint)
    }

    /// Reassembles a model from stored tensors, checking names and shapes against `config`.
    pub fn from_parts(
        config: CodecConfig,
        n_users: usize,
        params: ParamStore,
        bn: BTreeMap<String, BatchNormStats>,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let template = Model::new(config, n_users, &mut rng)?;
        if params.names() != template.params.names() {
            return Err(CodecError::Config("parameter names do not match the configuration".into()));
        }
        for ((name, a), (_, b)) in params.iter().zip(template.params.iter()) {
            if a.shape() != b.shape() {
                return Err(CodecError::Shape(format!(
                    "parameter {name} is {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        if bn.keys().ne(template.bn.keys())
            || bn.iter().any(|(k, s)| {
                let c = template.bn[k].mean.len();
                s.mean.len() != c || s.var.len() != c
            })
        {
            return Err(CodecError::Config("batch-norm statistics do not match the configuration".into()));
        }
        Ok(Self {
            params,
            bn,
            ..template
        })
    }

    pub fn zero_fusion(&mut self) {
        let names: Vec<String> = self.params.names().iter().filter(|n| n.starts_with("fuse")).cloned().collect();
        for name in names {
            let t = self.params.get_mut(&name).expect("listed");
            t.data_mut().fill(0.0);
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn entropy_model(&self, user: usize) -> EntropyModel {
        let params = self.params.get(&format!("{}.entropy", user_prefix(user))).expect("entropy params").clone();
        EntropyModel::from_params(params).expect("entropy shape")
    }

    fn layer_specs(&self, user: usize) -> Vec<LayerSpec> {
        let cfg = &self.config;
        let c = cfg.base_channels;
        let p = user_prefix(user);
        let transposed = cfg.upsampling == Upsampling::Transposed;
        let mut specs = Vec::new();
        for (i, &k) in cfg.encoder_kernels.iter().enumerate() {
            let last = i == 2;
            specs.push(LayerSpec {
                name: format!("{p}.enc.{i}"),
                c_in: if i == 0 { 2 } else { c },
                c_out: c,
                kernel: k,
                transposed: false,
                bn: !last,
                prelu: !last,
            });
        }
        let dec_kernels = [cfg.encoder_kernels[2], cfg.encoder_kernels[1], cfg.encoder_kernels[0]];
        specs.push(LayerSpec {
            name: format!("{p}.dec.up0"),
            c_in: c,
            c_out: c,
            kernel: dec_kernels[0],
            transposed,
            bn: cfg.decoder_plain_bn,
            prelu: true,
        });
        for r in 0..cfg.n_residual_blocks {
            for (half, prelu) in [("a", true), ("b", false)] {
                specs.push(LayerSpec {
                    name: format!("{p}.dec.res{r}{half}"),
                    c_in: c,
                    c_out: c,
                    kernel: cfg.residual_kernel,
                    transposed: false,
                    bn: true,
                    prelu,
                });
            }
        }
        specs.push(LayerSpec {
            name: format!("{p}.dec.up1"),
            c_in: c,
            c_out: c,
            kernel: dec_kernels[1],
            transposed,
            bn: cfg.decoder_plain_bn,
            prelu: true,
        });
        specs.push(LayerSpec {
            name: format!("{p}.dec.up2"),
            c_in: c,
            c_out: 2,
            kernel: dec_kernels[2],
            transposed,
            bn: false,
            prelu: false,
        });
        specs
    }

    fn add_layer(&mut self, s: &LayerSpec, rng: &mut impl Rng) {
        let shape = if s.transposed {
            [s.c_in, s.c_out, s.kernel, s.kernel]
        } else {
            [s.c_out, s.c_in, s.kernel, s.kernel]
        };
        let fan_in = s.c_in * s.kernel * s.kernel;
        self.params.insert(format!("{}.kernel", s.name), conv_init(&shape, fan_in, rng));
        self.params.insert(format!("{}.bias", s.name), conv_init(&[s.c_out], fan_in, rng));
        if s.bn {
            self.params.insert(format!("{}.bn.gamma", s.name), Tensor::full(&[s.c_out], 1.0));
            self.params.insert(format!("{}.bn.beta", s.name), Tensor::zeros(&[s.c_out]));
            self.bn.insert(format!("{}.bn", s.name), BatchNormStats::new(s.c_out));
        }
        if s.prelu {
            self.params.insert(format!("{}.prelu", s.name), Tensor::full(&[s.c_out], 0.25));
        }
    }

    fn check_users(&self, got: usize) -> Result<()> {
        if got != self.n_users {
            return Err(CodecError::UserCount {
                expected: self.n_users,
                got,
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match *x.shape() {
            [b, 2, n_c, n_t] if b > 0 => self.config.latent_shape(n_c, n_t).map(|_| ()),
            ref s => Err(CodecError::Shape(format!("expected [B, 2, N_c, N_t], got {s:?}"))),
        }
    }

    /// Eval-mode latents of user `user` for a `[B, 2, N_c, N_t]` batch.
    pub fn encode(&self, x: &Tensor, user: usize) -> Result<Tensor> {
        self.check_input(x)?;
        if user >= self.n_users {
            return Err(CodecError::UserCount {
                expected: self.n_users,
                got: user + 1,
            });
        }
        let mut bn = self.bn.clone();
        let mut g = Graph::new();
        let mut b = Builder::new(&mut g, &self.params, &mut bn, &self.config, false, false);
        let input = b.g.constant(x.clone());
        let m = b.encoder(input, user)?;
        Ok(g.value(m).clone())
    }

    /// Eval-mode reconstructions, one latent batch per user branch.
    pub fn decode(&self, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_users(latents.len())?;
        let shape = latents[0].shape();
        if latents.iter().any(|l| l.shape() != shape) {
            return Err(CodecError::Shape("user latents differ in shape".into()));
        }
        if shape.len() != 4 || shape[1] != self.config.base_channels {
            return Err(CodecError::Shape(format!(
                "latent {shape:?} does not carry {} channels",
                self.config.base_channels
            )));
        }
        let mut bn = self.bn.clone();
        let mut g = Graph::new();
        let mut b = Builder::new(&mut g, &self.params, &mut bn, &self.config, false, false);
        let ids: Vec<NodeId> = latents.iter().map(|l| b.g.constant(l.clone())).collect();
        let outs = b.decoder(&ids)?;
        Ok(outs.iter().map(|&id| g.value(id).clone()).collect())
    }

    /// Builds the training graph: noisy latents, reconstructions and rate terms.
    pub fn forward_train(&mut self, inputs: &[Tensor], rng: &mut impl Rng) -> Result<TrainForward> {
        self.check_users(inputs.len())?;
        for x in inputs {
            self.check_input(x)?;
            if x.shape() != inputs[0].shape() {
                return Err(CodecError::Shape("user batches differ in shape".into()));
            }
        }
        let mut graph = Graph::new();
        let mut ids = vec![None; self.params.len()];
        let (latents, noisy, recon, rate) = {
            let mut b = Builder::new(&mut graph, &self.params, &mut self.bn, &self.config, true, true);
            let mut latents = Vec::new();
            let mut noisy = Vec::new();
            let mut rate = Vec::new();
            for (user, x) in inputs.iter().enumerate() {
                let input = b.g.constant(x.clone());
                let m = b.encoder(input, user)?;
                let noise = add_noise(&Tensor::zeros(b.g.value(m).shape()), b.cfg.noise, rng);
                let n = b.g.constant(noise);
                let mt = b.g.add(m, n)?;
                latents.push(m);
                noisy.push(mt);
                if b.cfg.entropy_coding {
                    let p = b.param(&format!("{}.entropy", user_prefix(user)));
                    rate.push(EntropyModel::rate_bits(b.g, mt, p)?);
                }
            }
            let recon = b.decoder(&noisy)?;
            ids = std::mem::take(&mut b.ids);
            (latents, noisy, recon, rate)
        };
        Ok(TrainForward {
            graph,
            param_ids: ids,
            latents,
            noisy,
            recon,
            rate,
        })
    }

    /// Rounds every stored value to `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.params.values_mut() {
            t.round_to_f32();
        }
        for s in self.bn.values_mut() {
            for v in s.mean.iter_mut().chain(s.var.iter_mut()) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Stable 32-bit identifier derived from the configuration and all stored values.
    pub fn fingerprint(&self) -> u32 {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update((self.n_users as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        for (name, s) in &self.bn {
            h.update(name.as_bytes());
            for v in s.mean.iter().chain(&s.var) {
                h.update((*v as f32).to_le_bytes());
            }
        }
        let digest = h.finalize();
        u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]])
    }
}

/// Graph and handles produced by [`Model::forward_train`].
pub struct TrainForward {
    pub graph: Graph,
    param_ids: Vec<Option<NodeId>>,
    /// Continuous latents `M`, per user.
    pub latents: Vec<NodeId>,
    /// Noise-relaxed latents, per user.
    pub noisy: Vec<NodeId>,
    /// Reconstructions `[B, 2, N_c, N_t]`, per user.
    pub recon: Vec<NodeId>,
    /// Total rate in bits, per user; empty when entropy coding is disabled.
    pub rate: Vec<NodeId>,
}

impl TrainForward {
    /// Gradients aligned with the model's parameter order; unused parameters get zeros.
    pub fn param_grads(&self, grads: &mut Gradients, params: &ParamStore) -> Vec<Tensor> {
        self.param_ids
            .iter()
            .zip(params.iter())
            .map(|(id, (_, value))| {
                id.and_then(|id| grads.take(id))
                    .unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect()
    }

    pub fn param_node(&self, params: &ParamStore, name: &str) -> Option<NodeId> {
        params.position(name).and_then(|i| self.param_ids[i])
    }
}

struct Builder<'m> {
    g: &'m mut Graph,
    params: &'m ParamStore,
    ids: Vec<Option<NodeId>>,
    bn: &'m mut BTreeMap<String, BatchNormStats>,
    cfg: &'m CodecConfig,
    train: bool,
    trainable: bool,
}

impl<'m> Builder<'m> {
    fn new(
        g: &'m mut Graph,
        params: &'m ParamStore,
        bn: &'m mut BTreeMap<String, BatchNormStats>,
        cfg: &'m CodecConfig,
        train: bool,
        trainable: bool,
    ) -> Self {
        Self {
            g,
            params,
            ids: vec![None; params.len()],
            bn,
            cfg,
            train,
            trainable,
        }
    }

    fn param(&mut self, name: &str) -> NodeId {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("model has no parameter {name}"));
        if let Some(id) = self.ids[i] {
            return id;
        }
        let value = self.params.get(name).expect("indexed").clone();
        let id = if self.trainable {
            self.g.leaf(value)
        } else {
            self.g.constant(value)
        };
        self.ids[i] = Some(id);
        id
    }

    fn conv(&mut self, x: NodeId, name: &str, stride: usize) -> Result<NodeId> {
        let k = self.param(&format!("{name}.kernel"));
        let b = self.param(&format!("{name}.bias"));
        Ok(self.g.conv2d(x, k, Some(b), stride)?)
    }

    fn up_conv(&mut self, x: NodeId, name: &str, factor: usize) -> Result<NodeId> {
        let k = self.param(&format!("{name}.kernel"));
        let b = self.param(&format!("{name}.bias"));
        Ok(match (self.cfg.upsampling, factor) {
            (_, 1) => self.g.conv2d(x, k, Some(b), 1)?,
            (Upsampling::NearestConv, f) => self.g.upsample_conv2d(x, k, Some(b), f)?,
            (Upsampling::Transposed, f) => self.g.conv_transpose2d(x, k, Some(b), f)?,
        })
    }

    fn batch_norm(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let gamma = self.param(&format!("{name}.bn.gamma"));
        let beta = self.param(&format!("{name}.bn.beta"));
        let stats = self
            .bn
            .get_mut(&format!("{name}.bn"))
            .unwrap_or_else(|| panic!("model has no batch-norm statistics for {name}"));
        Ok(self.g.batch_norm(x, gamma, beta, stats, self.train)?)
    }

    fn prelu(&mut self, x: NodeId, name: &str) -> Result<NodeId> {
        let a = self.param(&format!("{name}.prelu"));
        Ok(self.g.prelu(x, a)?)
    }

    /// Normalization and activation after a convolution, honoring the block order.
    fn post(&mut self, x: NodeId, name: &str, bn: bool, prelu: bool) -> Result<NodeId> {
        let mut y = x;
        match self.cfg.block_order {
            BlockOrder::ConvBnPrelu => {
                if bn {
                    y = self.batch_norm(y, name)?;
                }
                if prelu {
                    y = self.prelu(y, name)?;
                }
            }
            BlockOrder::ConvPreluBn => {
                if prelu {
                    y = self.prelu(y, name)?;
                }
                if bn {
                    y = self.batch_norm(y, name)?;
                }
            }
        }
        Ok(y)
    }

    fn encoder(&mut self, x: NodeId, user: usize) -> Result<NodeId> {
        let p = user_prefix(user);
        let mut y = x;
        for i in 0..3 {
            let name = format!("{p}.enc.{i}");
            y = self.conv(y, &name, self.cfg.downsample[i])?;
            if i < 2 {
                y = self.post(y, &name, true, true)?;
            }
        }
        Ok(y)
    }

    fn residual_block(&mut self, x: NodeId, user: usize, r: usize) -> Result<NodeId> {
        let p = user_prefix(user);
        let a = format!("{p}.dec.res{r}a");
        let b = format!("{p}.dec.res{r}b");
        let mut y = self.conv(x, &a, 1)?;
        y = self.post(y, &a, true, true)?;
        y = self.conv(y, &b, 1)?;
        y = self.post(y, &b, true, false)?;
        Ok(self.g.add(x, y)?)
    }

    fn fuse(&mut self, feats: &[NodeId], stage: usize) -> Result<Vec<NodeId>> {
        let k = feats.len();
        let mut out = Vec::with_capacity(k);
        for to in 0..k {
            let mut acc = feats[to];
            for from in (0..k).filter(|&j| j != to) {
                let kernel = self.param(&fusion_name(stage, from, to));
                let t = self.g.conv2d(feats[from], kernel, None, 1)?;
                acc = self.g.add(acc, t)?;
            }
            out.push(acc);
        }
        Ok(out)
    }

    fn decoder(&mut self, latents: &[NodeId]) -> Result<Vec<NodeId>> {
        let cfg = self.cfg;
        let up = [cfg.downsample[2], cfg.downsample[1], cfg.downsample[0]];
        let k = latents.len();
        let mut feats = Vec::with_capacity(k);
        for (user, &m) in latents.iter().enumerate() {
            let name = format!("{}.dec.up0", user_prefix(user));
            let y = self.up_conv(m, &name, up[0])?;
            feats.push(self.post(y, &name, cfg.decoder_plain_bn, true)?);
        }
        let skip = feats.clone();
        for r in 0..cfg.n_residual_blocks {
            for (user, f) in feats.iter_mut().enumerate() {
                *f = self.residual_block(*f, user, r)?;
            }
            if k > 1 {
                if let Some(stage) = cfg.fusion_after_blocks.iter().position(|&b| b == r + 1) {
                    feats = self.fuse(&feats, stage)?;
                }
            }
        }
        let mut outs = Vec::with_capacity(k);
        for (user, (&f, &s)) in feats.iter().zip(&skip).enumerate() {
            let p = user_prefix(user);
            let mut y = self.g.add(f, s)?;
            let name = format!("{p}.dec.up1");
            y = self.up_conv(y, &name, up[1])?;
            y = self.post(y, &name, cfg.decoder_plain_bn, true)?;
            y = self.up_conv(y, &format!("{p}.dec.up2"), up[2])?;
            outs.push(y);
        }
        Ok(outs)
    }
}

/// Fixed-length code used when entropy coding is disabled: 256 equiprobable
/// symbols around zero plus an escape.
fn fixed_length_table() -> PmfTable {
    let mut freqs = vec![255u32; 256];
    freqs.push(PMF_TOTAL - 255 * 256);
    PmfTable::from_frequencies(-128, freqs).expect("valid fixed-length table")
}

/// Inference-only model with frozen coding tables.
#[derive(Debug, Clone)]
pub struct FrozenCodec {
    model: Model,
    tables: Vec<Vec<PmfTable>>,
    model_id: u32,
    lambda_codes: Vec<u16>,
}

impl FrozenCodec {
    /// Rounds `model` to checkpoint precision and derives its coding tables.
    /// `lambda_codes` holds the code each user branch writes into its headers.
    pub fn new(mut model: Model, lambda_codes: Vec<u16>) -> Result<Self> {
        model.check_users(lambda_codes.len())?;
        model.round_to_f32();
        let tables = (0..model.n_users())
            .map(|u| {
                if model.config.entropy_coding {
                    model.entropy_model(u).discretize(model.config.max_support_width)
                } else {
                    Ok(vec![fixed_length_table(); model.config.base_channels])
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let model_id = model.fingerprint();
        Ok(Self {
            model,
            tables,
            model_id,
            lambda_codes,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_id(&self) -> u32 {
        self.model_id
    }

    pub fn lambda_code(&self, user: usize) -> u16 {
        self.lambda_codes[user]
    }

    pub fn tables(&self, user: usize) -> &[PmfTable] {
        &self.tables[user]
    }

    /// Quantized latents `M̄` for a batch of one user's channels.
    pub fn quantized_latents(&self, hs: &[&ChannelMatrix], user: usize) -> Result<Tensor> {
        let x = batch_channels(hs)?;
        Ok(quantize(&self.model.encode(&x, user)?))
    }

    /// Encodes each channel of `hs` with branch `user` into its own bitstream.
    pub fn compress(&self, hs: &[&ChannelMatrix], user: usize) -> Result<Vec<Bitstream>> {
        let q = self.quantized_latents(hs, user)?;
        Ok(self.encode_latents(&q, user))
    }

    /// Range-codes a batch of quantized latents `[B, C, H, W]`, one bitstream per sample.
    pub fn encode_latents(&self, q: &Tensor, user: usize) -> Vec<Bitstream> {
        let [b, c, h, w] = q.shape().try_into().expect("rank-4 latent");
        let tables = range_coder::latent_tables(&self.tables[user], h * w);
        let shape = [c, h, w].map(|d| d as u16);
        (0..b)
            .map(|n| {
                let symbols: Vec<i32> = q.outer(n).iter().map(|&v| v as i32).collect();
                Bitstream {
                    model_id: self.model_id,
                    lambda_code: self.lambda_codes[user],
                    shape,
                    payload: range_coder::encode(&symbols, &tables),
                }
            })
            .collect()
    }

    /// Decodes `streams[user][n]` jointly across users for each sample `n`.
    pub fn decompress(&self, streams: &[Vec<Bitstream>]) -> Result<Vec<Vec<ChannelMatrix>>> {
        self.model.check_users(streams.len())?;
        let count = streams[0].len();
        if streams.iter().any(|s| s.len() != count) || count == 0 {
            return Err(CodecError::Shape("every user needs the same non-zero number of streams".into()));
        }
        let shape = streams[0][0].shape;
        let [c, h, w] = shape.map(|d| d as usize);
        if c != self.model.config.base_channels || h == 0 || w == 0 {
            return Err(CodecError::Shape(format!("stream latent shape {shape:?} does not fit the model")));
        }
        let mut latents = Vec::with_capacity(streams.len());
        for (user, list) in streams.iter().enumerate() {
            let tables = range_coder::latent_tables(&self.tables[user], h * w);
            let mut data = Vec::with_capacity(count * c * h * w);
            for s in list {
                if s.shape != shape {
                    return Err(CodecError::Shape("streams disagree on latent shape".into()));
                }
                let symbols = s.decode_symbols(self.model_id, &tables)?;
                data.extend(symbols.into_iter().map(|v| v as f64));
            }
            latents.push(Tensor::new(&[count, c, h, w], data).expect("decoded latent"));
        }
        let recon = self.model.decode(&latents)?;
        Ok(recon.iter().map(unbatch_channels).collect())
    }

    /// Reconstruction without the coder: `decode(quantize(encode(H)))`.
    pub fn reconstruct(&self, hs: &[Vec<&ChannelMatrix>]) -> Result<Vec<Vec<ChannelMatrix>>> {
        self.model.check_users(hs.len())?;
        let latents = hs
            .iter()
            .enumerate()
            .map(|(u, list)| self.quantized_latents(list, u))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.model.decode(&latents)?.iter().map(unbatch_channels).collect())
    }

    /// Model cross-entropy of quantized latents in bits, per sample.
    pub fn estimated_bits(&self, q: &Tensor, user: usize) -> Vec<f64> {
        let [b, c, h, w] = q.shape().try_into().expect("rank-4 latent");
        let plane = c * h * w;
        let em = self.model.entropy_model(user);
        (0..b)
            .map(|n| {
                let sample = Tensor::new(&[1, c, h, w], q.data()[n * plane..(n + 1) * plane].to_vec()).expect("slice");
                em.total_bits(&sample)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
