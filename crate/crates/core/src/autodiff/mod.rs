//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order; [`Graph::backward`] walks it once in reverse.
//! Image tensors are laid out `[batch, channel, height, width]`.

pub mod check;
pub mod conv;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;
use conv::{ConvGeometry, UpsampleConvGeometry};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("batch norm in training mode needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("unsupported resampling factor {0} (expected 2 or 4)")]
    UnsupportedFactor(usize),
    #[error("unsupported stride {0} (expected 1, 2 or 4)")]
    UnsupportedStride(usize),
    #[error("kernel extents must be odd, got {0}x{1}")]
    EvenKernel(usize, usize),
}

type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::Shape {
        op,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Differentiable operation implemented outside this module.
///
/// `backward` receives the forward inputs, the forward output, and the
/// gradient flowing into the output; it returns one optional gradient per input.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&mut self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Option<Tensor>>;
}

/// Running statistics and hyper-parameters of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: ConvGeometry,
    },
    UpsampleConv2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        geom: Box<UpsampleConvGeometry>,
        effective: Vec<f64>,
    },
    ConvTranspose2d {
        input: NodeId,
        kernel: NodeId,
        bias: Option<NodeId>,
        // Geometry of the forward convolution this layer is the adjoint of.
        geom: ConvGeometry,
    },
    Upsample {
        input: NodeId,
        factor: usize,
    },
    Prelu {
        input: NodeId,
        slope: NodeId,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    SquaredError {
        input: NodeId,
        target: Tensor,
    },
    WeightedSum(Vec<(NodeId, f64)>),
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(shape_err(op, format!("expected a rank-4 tensor, got {s:?}"))),
    }
}

fn check_kernel(kernel: &Tensor, c_in: usize, op: &'static str) -> Result<[usize; 4]> {
    let [o, i, kh, kw] = dims4(kernel, op)?;
    if i != c_in {
        return Err(shape_err(op, format!("kernel expects {i} input channels, input has {c_in}")));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(AutodiffError::EvenKernel(kh, kw));
    }
    Ok([o, i, kh, kw])
}

fn check_per_channel(t: &Tensor, channels: usize, op: &'static str) -> Result<()> {
    if t.shape() != [channels] {
        return Err(shape_err(op, format!("expected [{channels}], got {:?}", t.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Differentiable input (parameter or probed variable).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Strided cross-correlation with "SAME" zero padding.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>, stride: usize) -> Result<NodeId> {
        if ![1, 2, 4].contains(&stride) {
            return Err(AutodiffError::UnsupportedStride(stride));
        }
        let x = self.value(input);
        let [b, c, h, w] = dims4(x, "conv2d")?;
        let [o, _, kh, kw] = check_kernel(self.value(kernel), c, "conv2d")?;
        if let Some(bias) = bias {
            check_per_channel(self.value(bias), o, "conv2d")?;
        }
        let geom = ConvGeometry::same(c, o, h, w, kh, kw, stride);
        let mut out = Tensor::zeros(&[b, o, geom.out_h, geom.out_w]);
        let plane = o * geom.out_h * geom.out_w;
        let mut scratch = Vec::new();
        {
            let k = self.value(kernel).data();
            let bias_v = bias.map(|id| self.value(id).data());
            let out_data = out.data_mut();
            for n in 0..b {
                geom.forward(x.outer(n), k, bias_v, &mut out_data[n * plane..(n + 1) * plane], &mut scratch);
            }
        }
        let mut ids = vec![input, kernel];
        ids.extend(bias);
        let needs = self.needs(&ids);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, geom }, needs))
    }

    /// Nearest-neighbour upsampling followed by a stride-1 "SAME" convolution,
    /// evaluated without materializing the upsampled tensor.
    pub fn upsample_conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>, factor: usize) -> Result<NodeId> {
        if ![2, 4].contains(&factor) {
            return Err(AutodiffError::UnsupportedFactor(factor));
        }
        let x = self.value(input);
        let [b, c, h, w] = dims4(x, "upsample_conv2d")?;
        let [o, _, kh, kw] = check_kernel(self.value(kernel), c, "upsample_conv2d")?;
        if let Some(bias) = bias {
            check_per_channel(self.value(bias), o, "upsample_conv2d")?;
        }
        let geom = UpsampleConvGeometry::new(c, o, h, w, kh, kw, factor);
        let effective = geom.effective_kernel(self.value(kernel).data());
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let mut out = Tensor::zeros(&[b, o, oh, ow]);
        let plane = o * oh * ow;
        let mut scratch = Vec::new();
        {
            let bias_v = bias.map(|id| self.value(id).data());
            let out_data = out.data_mut();
            for n in 0..b {
                geom.forward(x.outer(n), &effective, bias_v, &mut out_data[n * plane..(n + 1) * plane], &mut scratch);
            }
        }
        let mut ids = vec![input, kernel];
        ids.extend(bias);
        let needs = self.needs(&ids);
        Ok(self.push(
            out,
            Op::UpsampleConv2d {
                input,
                kernel,
                bias,
                geom: Box::new(geom),
                effective,
            },
            needs,
        ))
    }

    /// Transposed convolution with stride `factor`; kernel laid out
    /// `[c_in, c_out, k_h, k_w]`. Output extents are `factor` times the input's.
    pub fn conv_transpose2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>, factor: usize) -> Result<NodeId> {
        if ![2, 4].contains(&factor) {
            return Err(AutodiffError::UnsupportedFactor(factor));
        }
        let x = self.value(input);
        let [b, c, h, w] = dims4(x, "conv_transpose2d")?;
        let [ki, o, kh, kw] = dims4(self.value(kernel), "conv_transpose2d")?;
        if ki != c {
            return Err(shape_err("conv_transpose2d", format!("kernel expects {ki} input channels, input has {c}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(AutodiffError::EvenKernel(kh, kw));
        }
        if let Some(bias) = bias {
            check_per_channel(self.value(bias), o, "conv_transpose2d")?;
        }
        let geom = ConvGeometry::same(o, c, h * factor, w * factor, kh, kw, factor);
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[b, o, oh, ow]);
        let plane = o * oh * ow;
        let mut scratch = Vec::new();
        {
            let k = self.value(kernel).data();
            let bias_v = bias.map(|id| self.value(id).data());
            let out_data = out.data_mut();
            for n in 0..b {
                let dst = &mut out_data[n * plane..(n + 1) * plane];
                geom.backward_input(k, x.outer(n), dst, &mut scratch);
                if let Some(bias_v) = bias_v {
                    for (co, bv) in bias_v.iter().enumerate() {
                        for v in &mut dst[co * oh * ow..(co + 1) * oh * ow] {
                            *v += bv;
                        }
                    }
                }
            }
        }
        let mut ids = vec![input, kernel];
        ids.extend(bias);
        let needs = self.needs(&ids);
        Ok(self.push(out, Op::ConvTranspose2d { input, kernel, bias, geom }, needs))
    }

    /// Nearest-neighbour replication by `factor` along both spatial axes.
    pub fn upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        if ![2, 4].contains(&factor) {
            return Err(AutodiffError::UnsupportedFactor(factor));
        }
        let x = self.value(input);
        let [b, c, h, w] = dims4(x, "upsample")?;
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let src = x.data();
        for (plane, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[base + (y / factor) * w + xx / factor];
                }
            }
        }
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::Upsample { input, factor }, needs))
    }

    /// `x` where `x ≥ 0`, `a_c · x` otherwise, with one slope per channel.
    pub fn prelu(&mut self, input: NodeId, slope: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let [_, c, h, w] = dims4(x, "prelu")?;
        check_per_channel(self.value(slope), c, "prelu")?;
        let a = self.value(slope).data();
        let plane = h * w;
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let s = a[i % c];
            for v in chunk {
                if *v < 0.0 {
                    *v *= s;
                }
            }
        }
        let needs = self.needs(&[input, slope]);
        Ok(self.push(out, Op::Prelu { input, slope }, needs))
    }

    /// Per-channel batch normalization over the batch and spatial axes.
    ///
    /// In training mode the batch statistics normalize the input and the running
    /// statistics are updated in place; otherwise the running statistics are used.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut BatchNormStats,
        train: bool,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let [b, c, h, w] = dims4(x, "batch_norm")?;
        check_per_channel(self.value(gamma), c, "batch_norm")?;
        check_per_channel(self.value(beta), c, "batch_norm")?;
        if stats.mean.len() != c {
            return Err(shape_err("batch_norm", format!("running stats hold {} channels, input has {c}", stats.mean.len())));
        }
        if train && b < 2 {
            return Err(AutodiffError::BatchTooSmall(b));
        }
        let plane = h * w;
        let count = (b * plane) as f64;
        let data = x.data();
        let mut inv_std = vec![0.0; c];
        let mut normalized = vec![0.0; data.len()];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0;
                for n in 0..b {
                    sum += data[(n * c + ch) * plane..(n * c + ch + 1) * plane].iter().sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for n in 0..b {
                    sq += data[(n * c + ch) * plane..(n * c + ch + 1) * plane]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / count;
                let m = stats.momentum;
                stats.mean[ch] = (1.0 - m) * stats.mean[ch] + m * mean;
                let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                stats.var[ch] = (1.0 - m) * stats.var[ch] + m * unbiased;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let s = 1.0 / (var + stats.eps).sqrt();
            inv_std[ch] = s;
            for n in 0..b {
                let range = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                for (dst, v) in normalized[range.clone()].iter_mut().zip(&data[range]) {
                    *dst = (v - mean) * s;
                }
            }
        }
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = Tensor::zeros(&[b, c, h, w]);
        for (i, (dst, src)) in out.data_mut().chunks_mut(plane).zip(normalized.chunks(plane)).enumerate() {
            let ch = i % c;
            for (d, v) in dst.iter_mut().zip(src) {
                *d = g[ch] * v + be[ch];
            }
        }
        let needs = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        let needs = self.needs(&[a]);
        self.push(out, Op::Scale(a, factor), needs)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(&[a]);
        self.push(out, Op::Sum(a), needs)
    }

    /// `Σ (a − target)²` as a scalar.
    pub fn squared_error(&mut self, a: NodeId, target: &Tensor) -> Result<NodeId> {
        let x = self.value(a);
        if x.shape() != target.shape() {
            return Err(shape_err("squared_error", format!("{:?} vs {:?}", x.shape(), target.shape())));
        }
        let total = x.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SquaredError {
                input: a,
                target: target.clone(),
            },
            needs,
        ))
    }

    /// `Σ wᵢ · sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(shape_err("weighted_sum", format!("term {:?} is not scalar", v.shape())));
            }
            total += w * v.item();
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs))
    }

    pub fn custom(&mut self, inputs: &[NodeId], mut op: Box<dyn CustomOp>) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|id| self.value(*id)).collect();
            op.forward(&vals)?
        };
        let needs = self.needs(inputs);
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut scratch = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut scratch);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], scratch: &mut Vec<f64>) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let b = x.shape()[0];
                let plane = geom.c_out * geom.out_h * geom.out_w;
                if self.wants(*kernel) {
                    let mut gk = Tensor::zeros(k.shape());
                    for n in 0..b {
                        geom.backward_kernel(x.outer(n), &g.data()[n * plane..(n + 1) * plane], gk.data_mut(), scratch);
                    }
                    self.accumulate(grads, *kernel, gk);
                }
                if self.wants(*input) {
                    let mut gx = Tensor::zeros(x.shape());
                    let in_plane = x.len() / b;
                    for n in 0..b {
                        geom.backward_input(
                            k.data(),
                            &g.data()[n * plane..(n + 1) * plane],
                            &mut gx.data_mut()[n * in_plane..(n + 1) * in_plane],
                            scratch,
                        );
                    }
                    self.accumulate(grads, *input, gx);
                }
                if let Some(bias) = bias {
                    self.bias_grad(grads, *bias, g, geom.c_out);
                }
            }
            Op::UpsampleConv2d {
                input,
                kernel,
                bias,
                geom,
                effective,
            } => {
                let x = self.value(*input);
                let b = x.shape()[0];
                let plane = geom.c_out * geom.out_h() * geom.out_w();
                let in_plane = x.len() / b;
                let want_k = self.wants(*kernel);
                let want_x = self.wants(*input);
                let mut g_eff = vec![0.0; if want_k { geom.effective_len() } else { 0 }];
                let mut gx = want_x.then(|| Tensor::zeros(x.shape()));
                for n in 0..b {
                    geom.backward(
                        x.outer(n),
                        effective,
                        &g.data()[n * plane..(n + 1) * plane],
                        want_k.then_some(g_eff.as_mut_slice()),
                        gx.as_mut().map(|t| &mut t.data_mut()[n * in_plane..(n + 1) * in_plane]),
                        scratch,
                    );
                }
                if want_k {
                    let mut gk = Tensor::zeros(self.value(*kernel).shape());
                    geom.kernel_grad_from_effective(&g_eff, gk.data_mut());
                    self.accumulate(grads, *kernel, gk);
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *input, gx);
                }
                if let Some(bias) = bias {
                    self.bias_grad(grads, *bias, g, geom.c_out);
                }
            }
            Op::ConvTranspose2d { input, kernel, bias, geom } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let b = x.shape()[0];
                let small = x.len() / b;
                let big = g.len() / b;
                if self.wants(*kernel) {
                    let mut gk = Tensor::zeros(k.shape());
                    for n in 0..b {
                        geom.backward_kernel(&g.data()[n * big..(n + 1) * big], x.outer(n), gk.data_mut(), scratch);
                    }
                    self.accumulate(grads, *kernel, gk);
                }
                if self.wants(*input) {
                    let mut gx = Tensor::zeros(x.shape());
                    for n in 0..b {
                        geom.forward(
                            &g.data()[n * big..(n + 1) * big],
                            k.data(),
                            None,
                            &mut gx.data_mut()[n * small..(n + 1) * small],
                            scratch,
                        );
                    }
                    self.accumulate(grads, *input, gx);
                }
                if let Some(bias) = bias {
                    self.bias_grad(grads, *bias, g, geom.c_in);
                }
            }
            Op::Upsample { input, factor } => {
                let x = self.value(*input);
                let [_, _, h, w] = dims4(x, "upsample").expect("validated in forward");
                let (oh, ow) = (h * factor, w * factor);
                let mut gx = Tensor::zeros(x.shape());
                for (plane, src) in g.data().chunks(oh * ow).enumerate() {
                    let dst = &mut gx.data_mut()[plane * h * w..(plane + 1) * h * w];
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[(y / factor) * w + xx / factor] += src[y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *input, gx);
            }
            Op::Prelu { input, slope } => {
                let x = self.value(*input);
                let a = self.value(*slope).data();
                let c = x.shape()[1];
                let plane = x.shape()[2] * x.shape()[3];
                let mut gx = Tensor::zeros(x.shape());
                let mut ga = vec![0.0; c];
                for (i, ((dst, xs), gs)) in gx
                    .data_mut()
                    .chunks_mut(plane)
                    .zip(x.data().chunks(plane))
                    .zip(g.data().chunks(plane))
                    .enumerate()
                {
                    let ch = i % c;
                    for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                        if xv < 0.0 {
                            *d = a[ch] * gv;
                            ga[ch] += xv * gv;
                        } else {
                            *d = gv;
                        }
                    }
                }
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *slope, Tensor::new(&[c], ga).expect("per-channel"));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                train,
            } => {
                let x = self.value(*input);
                let [b, c, h, w] = dims4(x, "batch_norm").expect("validated in forward");
                let plane = h * w;
                let count = (b * plane) as f64;
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gs, xs)) in g.data().chunks(plane).zip(normalized.chunks(plane)).enumerate() {
                    let ch = i % c;
                    for (gv, xv) in gs.iter().zip(xs) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * xv;
                    }
                }
                if self.wants(*input) {
                    let mut gx = Tensor::zeros(x.shape());
                    for (i, ((dst, gs), xs)) in gx
                        .data_mut()
                        .chunks_mut(plane)
                        .zip(g.data().chunks(plane))
                        .zip(normalized.chunks(plane))
                        .enumerate()
                    {
                        let ch = i % c;
                        let scale = gam[ch] * inv_std[ch];
                        for ((d, gv), xv) in dst.iter_mut().zip(gs).zip(xs) {
                            *d = if *train {
                                scale * (gv - sum_g[ch] / count - xv * sum_gx[ch] / count)
                            } else {
                                scale * gv
                            };
                        }
                    }
                    self.accumulate(grads, *input, gx);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], sum_gx).expect("per-channel"));
                self.accumulate(grads, *beta, Tensor::new(&[c], sum_g).expect("per-channel"));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, g.map(|v| v * factor));
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::SquaredError { input, target } => {
                let gv = g.item();
                let x = self.value(*input);
                let mut gx = x.clone();
                for (d, t) in gx.data_mut().iter_mut().zip(target.data()) {
                    *d = 2.0 * gv * (*d - t);
                }
                self.accumulate(grads, *input, gx);
            }
            Op::WeightedSum(terms) => {
                let gv = g.item();
                for &(id, w) in terms {
                    self.accumulate(grads, id, Tensor::scalar(gv * w).reshape(self.value(id).shape()).expect("scalar"));
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|id| self.value(*id)).collect();
                let input_grads = op.backward(&vals, &node.value, g);
                for (id, grad) in inputs.iter().zip(input_grads) {
                    if let Some(grad) = grad {
                        self.accumulate(grads, *id, grad);
                    }
                }
            }
        }
    }

    fn bias_grad(&self, grads: &mut [Option<Tensor>], bias: NodeId, g: &Tensor, channels: usize) {
        if !self.wants(bias) {
            return;
        }
        let plane = g.shape()[2] * g.shape()[3];
        let mut gb = vec![0.0; channels];
        for (i, chunk) in g.data().chunks(plane).enumerate() {
            gb[i % channels] += chunk.iter().sum::<f64>();
        }
        self.accumulate(grads, bias, Tensor::new(&[channels], gb).expect("per-channel"));
    }
}

#[cfg(test)]
mod tests;
