//! Eager forward graph with recorded reverse-mode gradients.
//!
//! Every op computes its value at creation time and records enough
//! context (pooling argmaxes, dropout masks, padding offsets) to play
//! the backward pass without recomputation. Rank-2 activations are
//! `[channels x length]`; dense activations are rank-1 vectors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Conv / pool padding mode. `Same` zero-pads to output length
/// ceil(L / stride); `Valid` uses only fully in-bounds windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv1d {
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad_left: usize,
    },
    Dense {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    ConcatChannels {
        a: NodeId,
        b: NodeId,
    },
    LayerNorm {
        input: NodeId,
        gain: NodeId,
        offset: NodeId,
        eps: f64,
    },
    SpatialDropout {
        input: NodeId,
        /// Per-channel keep mask already including the 1/(1-rate) scale.
        mask: Vec<f64>,
    },
    GlobalMaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    MaxPool1d {
        input: NodeId,
        /// Input column index feeding each output cell (row-major).
        argmax: Vec<usize>,
    },
    Softmax {
        input: NodeId,
    },
    /// Scalar dot product with a constant vector.
    DotConst {
        input: NodeId,
        consts: Vec<f64>,
    },
    Index {
        input: NodeId,
        index: usize,
    },
    Ln {
        input: NodeId,
    },
    Neg {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    ScalarMul {
        input: NodeId,
        c: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward pass over one sample.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value out of {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter's value for this pass).
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// 1D cross-correlation. Input `[c_in x length]`, weights
    /// `[filters x c_in x kernel]`, optional bias `[filters]`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::argument("stride must be >= 1"));
        }
        let x = self.value(input).clone();
        let w = self.value(weights).clone();
        if x.shape.len() != 2 || w.shape.len() != 3 {
            return Err(Error::Shape(format!(
                "conv1d expects [c_in x L] input and [F x c_in x K] weights, got {:?} and {:?}",
                x.shape, w.shape
            )));
        }
        let (c_in, length) = (x.shape[0], x.shape[1]);
        let (filters, w_cin, kernel) = (w.shape[0], w.shape[1], w.shape[2]);
        if w_cin != c_in {
            return Err(Error::Shape(format!(
                "conv1d channel mismatch: input {c_in}, weights {w_cin}"
            )));
        }
        let (out_len, pad_left) = match padding {
            Padding::Same => {
                let out = length.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(length);
                (out, total / 2)
            }
            Padding::Valid => {
                if kernel > length {
                    return Err(Error::Shape(format!(
                        "valid conv kernel {kernel} exceeds length {length}"
                    )));
                }
                ((length - kernel) / stride + 1, 0)
            }
        };
        let b = bias.map(|id| self.value(id).clone());
        if let Some(b) = &b {
            if b.len() != filters {
                return Err(Error::Shape(format!(
                    "conv1d bias length {} != filters {filters}",
                    b.len()
                )));
            }
        }
        let mut out = vec![0.0; filters * out_len];
        for f in 0..filters {
            for o in 0..out_len {
                let mut acc = b.as_ref().map_or(0.0, |b| b.data[f]);
                let origin = (o * stride) as isize - pad_left as isize;
                for c in 0..c_in {
                    let wrow = &w.data[(f * c_in + c) * kernel..(f * c_in + c + 1) * kernel];
                    let xrow = &x.data[c * length..(c + 1) * length];
                    for (j, &wj) in wrow.iter().enumerate() {
                        let pos = origin + j as isize;
                        if pos >= 0 && (pos as usize) < length {
                            acc += wj * xrow[pos as usize];
                        }
                    }
                }
                out[f * out_len + o] = acc;
            }
        }
        let requires = self.needs_grad(input)
            || self.needs_grad(weights)
            || bias.map(|b| self.needs_grad(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(vec![filters, out_len], out)?,
            Op::Conv1d {
                input,
                weights,
                bias,
                stride,
                pad_left,
            },
            requires,
        ))
    }

    /// Fully connected layer: input `[n]`, weights `[out x n]`, bias `[out]`.
    pub fn dense(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weights);
        let b = self.value(bias);
        if w.shape.len() != 2 || w.shape[1] != x.len() || b.len() != w.shape[0] {
            return Err(Error::Shape(format!(
                "dense shapes: input {:?}, weights {:?}, bias {:?}",
                x.shape, w.shape, b.shape
            )));
        }
        let (rows, cols) = (w.shape[0], w.shape[1]);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &w.data[r * cols..(r + 1) * cols];
            let acc: f64 = row.iter().zip(&x.data).map(|(a, b)| a * b).sum();
            out.push(acc + b.data[r]);
        }
        let requires = self.needs_grad(input) || self.needs_grad(weights) || self.needs_grad(bias);
        Ok(self.push(Tensor::vector(out), Op::Dense { input, weights, bias }, requires))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = Tensor {
            shape: self.value(input).shape.clone(),
            data: self.value(input).data.iter().map(|v| v.max(0.0)).collect(),
        };
        let requires = self.needs_grad(input);
        self.push(value, Op::Relu { input }, requires)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let requires = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Add { a, b }, requires))
    }

    /// Stacks two `[C x L]` activations along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(Error::Shape(format!(
                "concat shapes: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let shape = vec![ta.shape[0] + tb.shape[0], ta.shape[1]];
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let requires = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(
            Tensor { shape, data },
            Op::ConcatChannels { a, b },
            requires,
        ))
    }

    /// Layer normalization over the channel axis per time step, with
    /// per-channel affine gain/offset.
    pub fn layer_norm(
        &mut self,
        input: NodeId,
        gain: NodeId,
        offset: NodeId,
    ) -> Result<NodeId> {
        let eps = 1e-5;
        let x = self.value(input);
        if x.shape.len() != 2 {
            return Err(Error::Shape(format!("layer_norm expects rank 2, got {:?}", x.shape)));
        }
        let (channels, length) = (x.shape[0], x.shape[1]);
        let g = self.value(gain);
        let b = self.value(offset);
        if g.len() != channels || b.len() != channels {
            return Err(Error::Shape(format!(
                "layer_norm affine length {} / {} != channels {channels}",
                g.len(),
                b.len()
            )));
        }
        let mut out = vec![0.0; channels * length];
        for t in 0..length {
            let mut mean = 0.0;
            for c in 0..channels {
                mean += x.data[c * length + t];
            }
            mean /= channels as f64;
            let mut var = 0.0;
            for c in 0..channels {
                let d = x.data[c * length + t] - mean;
                var += d * d;
            }
            var /= channels as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for c in 0..channels {
                let normalized = (x.data[c * length + t] - mean) * inv_std;
                out[c * length + t] = g.data[c] * normalized + b.data[c];
            }
        }
        let requires = self.needs_grad(input) || self.needs_grad(gain) || self.needs_grad(offset);
        Ok(self.push(
            Tensor::new(vec![channels, length], out)?,
            Op::LayerNorm {
                input,
                gain,
                offset,
                eps,
            },
            requires,
        ))
    }

    /// Zeroes whole channels with probability `rate` during training,
    /// scaling survivors by 1/(1-rate). Identity at inference.
    pub fn spatial_dropout(
        &mut self,
        input: NodeId,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::argument(format!("dropout rate {rate} outside [0,1)")));
        }
        let x = self.value(input);
        let channels = x.shape[0];
        let mask: Vec<f64> = if training && rate > 0.0 {
            (0..channels)
                .map(|_| {
                    if rng.gen::<f64>() < rate {
                        0.0
                    } else {
                        1.0 / (1.0 - rate)
                    }
                })
                .collect()
        } else {
            vec![1.0; channels]
        };
        let per_channel = x.len() / channels;
        let mut data = x.data.clone();
        for c in 0..channels {
            for v in &mut data[c * per_channel..(c + 1) * per_channel] {
                *v *= mask[c];
            }
        }
        let requires = self.needs_grad(input);
        Ok(self.push(
            Tensor {
                shape: x.shape.clone(),
                data,
            },
            Op::SpatialDropout { input, mask },
            requires,
        ))
    }

    /// Reduces each channel of a `[C x L]` activation to its maximum.
    /// Gradient routes to the first maximal position.
    pub fn global_max_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape.len() != 2 || x.shape[1] == 0 {
            return Err(Error::Shape(format!("global_max_pool expects [C x L], got {:?}", x.shape)));
        }
        let (channels, length) = (x.shape[0], x.shape[1]);
        let mut out = Vec::with_capacity(channels);
        let mut argmax = Vec::with_capacity(channels);
        for c in 0..channels {
            let row = &x.data[c * length..(c + 1) * length];
            let (mut best_i, mut best) = (0, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out.push(best);
            argmax.push(best_i);
        }
        let requires = self.needs_grad(input);
        Ok(self.push(
            Tensor::vector(out),
            Op::GlobalMaxPool { input, argmax },
            requires,
        ))
    }

    /// Strided max pooling over the time axis. Padded positions are
    /// treated as -inf, so every window selects a real input.
    pub fn max_pool1d(
        &mut self,
        input: NodeId,
        kernel: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        if kernel == 0 || stride == 0 {
            return Err(Error::argument("pool kernel and stride must be >= 1"));
        }
        let x = self.value(input);
        let (channels, length) = (x.shape[0], x.shape[1]);
        let (out_len, pad_left) = match padding {
            Padding::Same => {
                let out = length.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(length);
                (out, total / 2)
            }
            Padding::Valid => {
                if kernel > length {
                    return Err(Error::Shape(format!(
                        "pool kernel {kernel} exceeds length {length}"
                    )));
                }
                ((length - kernel) / stride + 1, 0)
            }
        };
        let mut out = vec![0.0; channels * out_len];
        let mut argmax = vec![0usize; channels * out_len];
        for c in 0..channels {
            let row = &x.data[c * length..(c + 1) * length];
            for o in 0..out_len {
                let origin = (o * stride) as isize - pad_left as isize;
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for j in 0..kernel {
                    let pos = origin + j as isize;
                    if pos >= 0 && (pos as usize) < length {
                        let v = row[pos as usize];
                        if v > best {
                            best = v;
                            best_i = pos as usize;
                        }
                    }
                }
                out[c * out_len + o] = best;
                argmax[c * out_len + o] = best_i;
            }
        }
        let requires = self.needs_grad(input);
        Ok(self.push(
            Tensor::new(vec![channels, out_len], out)?,
            Op::MaxPool1d { input, argmax },
            requires,
        ))
    }

    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape.len() != 1 {
            return Err(Error::Shape(format!("softmax expects rank 1, got {:?}", x.shape)));
        }
        let max = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.data.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let value = Tensor::vector(exps.iter().map(|e| e / total).collect());
        let requires = self.needs_grad(input);
        Ok(self.push(value, Op::Softmax { input }, requires))
    }

    /// Scalar dot product with a constant vector (the fusion loss core).
    pub fn dot_const(&mut self, input: NodeId, consts: Vec<f64>) -> Result<NodeId> {
        let x = self.value(input);
        if x.len() != consts.len() {
            return Err(Error::Shape(format!(
                "dot_const length mismatch: {} vs {}",
                x.len(),
                consts.len()
            )));
        }
        let value: f64 = x.data.iter().zip(&consts).map(|(a, b)| a * b).sum();
        let requires = self.needs_grad(input);
        Ok(self.push(Tensor::scalar(value), Op::DotConst { input, consts }, requires))
    }

    pub fn index(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let x = self.value(input);
        if index >= x.len() {
            return Err(Error::Shape(format!("index {index} out of {}", x.len())));
        }
        let value = Tensor::scalar(x.data[index]);
        let requires = self.needs_grad(input);
        Ok(self.push(value, Op::Index { input, index }, requires))
    }

    pub fn ln(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        if x.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::argument("ln of nonpositive value"));
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v.ln()).collect(),
        };
        let requires = self.needs_grad(input);
        Ok(self.push(value, Op::Ln { input }, requires))
    }

    pub fn neg(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| -v).collect(),
        };
        let requires = self.needs_grad(input);
        self.push(value, Op::Neg { input }, requires)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(input).data.iter().sum());
        let requires = self.needs_grad(input);
        self.push(value, Op::Sum { input }, requires)
    }

    pub fn scalar_mul(&mut self, input: NodeId, c: f64) -> NodeId {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * c).collect(),
        };
        let requires = self.needs_grad(input);
        self.push(value, Op::ScalarMul { input, c }, requires)
    }

    /// Reverse-mode pass from a scalar loss node. Returns one gradient
    /// slot per node; nodes the loss does not reach keep `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor>>> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty graph".to_string()));
        }
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(grad);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Conv1d {
                    input,
                    weights,
                    bias,
                    stride,
                    pad_left,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weights);
                    let (c_in, length) = (x.shape[0], x.shape[1]);
                    let (filters, kernel) = (w.shape[0], w.shape[2]);
                    let out_len = node.value.shape[1];
                    if self.needs_grad(*input) {
                        let gx = ensure(&mut grads[input.0], &x.shape);
                        for f in 0..filters {
                            for o in 0..out_len {
                                let gy = grad.data[f * out_len + o];
                                if gy == 0.0 {
                                    continue;
                                }
                                let origin = (o * stride) as isize - *pad_left as isize;
                                for c in 0..c_in {
                                    let wrow =
                                        &w.data[(f * c_in + c) * kernel..(f * c_in + c + 1) * kernel];
                                    for (j, &wj) in wrow.iter().enumerate() {
                                        let pos = origin + j as isize;
                                        if pos >= 0 && (pos as usize) < length {
                                            gx.data[c * length + pos as usize] += wj * gy;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if self.needs_grad(*weights) {
                        let gw = ensure(&mut grads[weights.0], &w.shape);
                        for f in 0..filters {
                            for o in 0..out_len {
                                let gy = grad.data[f * out_len + o];
                                if gy == 0.0 {
                                    continue;
                                }
                                let origin = (o * stride) as isize - *pad_left as isize;
                                for c in 0..c_in {
                                    let xrow = &x.data[c * length..(c + 1) * length];
                                    for j in 0..kernel {
                                        let pos = origin + j as isize;
                                        if pos >= 0 && (pos as usize) < length {
                                            gw.data[(f * c_in + c) * kernel + j] +=
                                                xrow[pos as usize] * gy;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(bias) = bias {
                        if self.needs_grad(*bias) {
                            let gb = ensure(&mut grads[bias.0], &[filters]);
                            for f in 0..filters {
                                gb.data[f] += grad.data[f * out_len..(f + 1) * out_len]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                    }
                }
                Op::Dense {
                    input,
                    weights,
                    bias,
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weights);
                    let (rows, cols) = (w.shape[0], w.shape[1]);
                    if self.needs_grad(*input) {
                        let gx = ensure(&mut grads[input.0], &x.shape);
                        for r in 0..rows {
                            let gy = grad.data[r];
                            if gy == 0.0 {
                                continue;
                            }
                            let wrow = &w.data[r * cols..(r + 1) * cols];
                            for (gxv, &wv) in gx.data.iter_mut().zip(wrow) {
                                *gxv += wv * gy;
                            }
                        }
                    }
                    if self.needs_grad(*weights) {
                        let gw = ensure(&mut grads[weights.0], &w.shape);
                        for r in 0..rows {
                            let gy = grad.data[r];
                            if gy == 0.0 {
                                continue;
                            }
                            for (c, &xv) in x.data.iter().enumerate() {
                                gw.data[r * cols + c] += xv * gy;
                            }
                        }
                    }
                    if self.needs_grad(*bias) {
                        let gb = ensure(&mut grads[bias.0], &[rows]);
                        gb.add_assign(&Tensor::vector(grad.data.clone()));
                    }
                }
                Op::Relu { input } => {
                    if self.needs_grad(*input) {
                        let x = self.value(*input);
                        let gx = ensure(&mut grads[input.0], &x.shape);
                        for ((gxv, &xv), &gy) in gx.data.iter_mut().zip(&x.data).zip(&grad.data) {
                            if xv > 0.0 {
                                *gxv += gy;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    for side in [a, b] {
                        if self.needs_grad(*side) {
                            let shape = self.value(*side).shape.clone();
                            let g = ensure(&mut grads[side.0], &shape);
                            g.add_assign(&grad);
                        }
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let na = self.value(*a).len();
                    if self.needs_grad(*a) {
                        let shape = self.value(*a).shape.clone();
                        let g = ensure(&mut grads[a.0], &shape);
                        for (gv, &gy) in g.data.iter_mut().zip(&grad.data[..na]) {
                            *gv += gy;
                        }
                    }
                    if self.needs_grad(*b) {
                        let shape = self.value(*b).shape.clone();
                        let g = ensure(&mut grads[b.0], &shape);
                        for (gv, &gy) in g.data.iter_mut().zip(&grad.data[na..]) {
                            *gv += gy;
                        }
                    }
                }
                Op::LayerNorm {
                    input,
                    gain,
                    offset,
                    eps,
                } => {
                    let x = self.value(*input);
                    let g = self.value(*gain);
                    let (channels, length) = (x.shape[0], x.shape[1]);
                    let cf = channels as f64;
                    for t in 0..length {
                        let mut mean = 0.0;
                        for c in 0..channels {
                            mean += x.data[c * length + t];
                        }
                        mean /= cf;
                        let mut var = 0.0;
                        for c in 0..channels {
                            let d = x.data[c * length + t] - mean;
                            var += d * d;
                        }
                        var /= cf;
                        let inv_std = 1.0 / (var + eps).sqrt();

                        // dx_hat and the two reductions it feeds.
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; channels];
                        let mut xhat = vec![0.0; channels];
                        for c in 0..channels {
                            let gy = grad.data[c * length + t];
                            xhat[c] = (x.data[c * length + t] - mean) * inv_std;
                            dxhat[c] = gy * g.data[c];
                            sum_dxhat += dxhat[c];
                            sum_dxhat_xhat += dxhat[c] * xhat[c];
                        }
                        if self.needs_grad(*input) {
                            let gx = ensure(&mut grads[input.0], &x.shape);
                            for c in 0..channels {
                                gx.data[c * length + t] += inv_std
                                    * (dxhat[c]
                                        - sum_dxhat / cf
                                        - xhat[c] * sum_dxhat_xhat / cf);
                            }
                        }
                        if self.needs_grad(*gain) {
                            let gg = ensure(&mut grads[gain.0], &[channels]);
                            for c in 0..channels {
                                gg.data[c] += grad.data[c * length + t] * xhat[c];
                            }
                        }
                        if self.needs_grad(*offset) {
                            let gb = ensure(&mut grads[offset.0], &[channels]);
                            for c in 0..channels {
                                gb.data[c] += grad.data[c * length + t];
                            }
                        }
                    }
                }
                Op::SpatialDropout { input, mask } => {
                    if self.needs_grad(*input) {
                        let shape = self.value(*input).shape.clone();
                        let per_channel = grad.len() / mask.len();
                        let gx = ensure(&mut grads[input.0], &shape);
                        for (c, &m) in mask.iter().enumerate() {
                            for i in 0..per_channel {
                                gx.data[c * per_channel + i] += grad.data[c * per_channel + i] * m;
                            }
                        }
                    }
                }
                Op::GlobalMaxPool { input, argmax } => {
                    if self.needs_grad(*input) {
                        let shape = self.value(*input).shape.clone();
                        let length = shape[1];
                        let gx = ensure(&mut grads[input.0], &shape);
                        for (c, &i) in argmax.iter().enumerate() {
                            gx.data[c * length + i] += grad.data[c];
                        }
                    }
                }
                Op::MaxPool1d { input, argmax } => {
                    if self.needs_grad(*input) {
                        let shape = self.value(*input).shape.clone();
                        let length = shape[1];
                        let out_len = node.value.shape[1];
                        let gx = ensure(&mut grads[input.0], &shape);
                        for c in 0..shape[0] {
                            for o in 0..out_len {
                                let i = argmax[c * out_len + o];
                                gx.data[c * length + i] += grad.data[c * out_len + o];
                            }
                        }
                    }
                }
                Op::Softmax { input } => {
                    if self.needs_grad(*input) {
                        let y = &node.value;
                        let dot: f64 = y.data.iter().zip(&grad.data).map(|(a, b)| a * b).sum();
                        let shape = self.value(*input).shape.clone();
                        let gx = ensure(&mut grads[input.0], &shape);
                        for ((gxv, &yv), &gy) in gx.data.iter_mut().zip(&y.data).zip(&grad.data) {
                            *gxv += yv * (gy - dot);
                        }
                    }
                }
                Op::DotConst { input, consts } => {
                    if self.needs_grad(*input) {
                        let shape = self.value(*input).shape.clone();
                        let gx = ensure(&mut grads[input.0], &shape);
                        let gy = grad.data[0];
                        for (gxv, &cv) in gx.data.iter_mut().zip(consts) {
                            *gxv += cv * gy;
                        }
                    }
                }
                Op::Index { input, index } => {
                    if self.needs_grad(*input) {
                        let shape = self.value(*input).shape.clone();
                        let gx = ensure(&mut grads[input.0], &shape);
                        gx.data[*index] += grad.data[0];
                    }
                }
                Op::Ln { input } => {
                    if self.needs_grad(*input) {
                        let x = self.value(*input);
                        let shape = x.shape.clone();
                        let gx = ensure(&mut grads[input.0], &shape);
                        for ((gxv, &xv), &gy) in gx.data.iter_mut().zip(&x.data).zip(&grad.data) {
                            *gxv += gy / xv;
                        }
                    }
                }
                Op::Neg { input } => {
                    if self.needs_grad(*input) {
                        let shape = self.value(*input).shape.clone();
                        let gx = ensure(&mut grads[input.0], &shape);
                        for (gxv, &gy) in gx.data.iter_mut().zip(&grad.data) {
                            *gxv -= gy;
                        }
                    }
                }
                Op::Sum { input } => {
                    if self.needs_grad(*input) {
                        let shape = self.value(*input).shape.clone();
                        let gx = ensure(&mut grads[input.0], &shape);
                        for gxv in &mut gx.data {
                            *gxv += grad.data[0];
                        }
                    }
                }
                Op::ScalarMul { input, c } => {
                    if self.needs_grad(*input) {
                        let shape = self.value(*input).shape.clone();
                        let gx = ensure(&mut grads[input.0], &shape);
                        for (gxv, &gy) in gx.data.iter_mut().zip(&grad.data) {
                            *gxv += c * gy;
                        }
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Ok(grads)
    }
}

fn ensure<'a>(slot: &'a mut Option<Tensor>, shape: &[usize]) -> &'a mut Tensor {
    slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}
