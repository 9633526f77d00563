//! Reverse-mode differentiation over a linear tape.
//!
//! Each primitive appends its output value and enough saved state to replay
//! the adjoint. [`Tape::backward`] walks the record in reverse and returns
//! fresh gradient accumulators, so a tape can be differentiated more than once.

use std::sync::Arc;

use rand::Rng;

use super::gemm::gemm;
use super::tensor::{inverse_permutation, permute_data, Tensor};
use crate::error::{invalid, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used to address fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    AddBias,
    Relu,
    Dropout,
    Reshape,
    Permute,
    Scale,
    Sum,
    MeanAxis,
    TemporalConv,
    GraphConv,
    BatchNorm,
    SoftmaxCrossEntropy,
}

impl std::str::FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "add_bias" => OpKind::AddBias,
            "relu" => OpKind::Relu,
            "dropout" => OpKind::Dropout,
            "reshape" => OpKind::Reshape,
            "permute" => OpKind::Permute,
            "scale" => OpKind::Scale,
            "sum" => OpKind::Sum,
            "mean_axis" => OpKind::MeanAxis,
            "temporal_conv" => OpKind::TemporalConv,
            "graph_conv" => OpKind::GraphConv,
            "batch_norm" => OpKind::BatchNorm,
            "softmax_cross_entropy" => OpKind::SoftmaxCrossEntropy,
            other => return Err(format!("unknown op kind `{other}`")),
        })
    }
}

/// Batch-norm statistics carried between steps, outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        b: usize,
        ch: usize,
        inner: usize,
    },
    Relu {
        x: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Reshape {
        x: usize,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Sum {
        x: usize,
    },
    MeanAxis {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    TemporalConv {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    GraphConv {
        x: usize,
        adj: Arc<Tensor>,
        w: usize,
        b: Option<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        ch: usize,
        inner: usize,
        train: bool,
    },
    SoftmaxCe {
        logits: usize,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Relu { .. } => OpKind::Relu,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::TemporalConv { .. } => OpKind::TemporalConv,
            Op::GraphConv { .. } => OpKind::GraphConv,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar w.r.t. `v`; `None` when `v`
    /// does not influence it or was recorded as a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flips the sign of every adjoint emitted by primitives of `kind`.
    /// Exists so the gradient checker can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient `backward` reports.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].needs_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(invalid(format!("matmul shape mismatch {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let g = self.grad_of(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a: a.0, b: b.0 },
            g,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(invalid(format!(
                "add shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let g = self.grad_of(&[a.0, b.0]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Add { a: a.0, b: b.0 },
            g,
        ))
    }

    /// Adds a per-channel bias `b` (length = extent of `axis`) to `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.value(b).len() != shape[axis] {
            return Err(invalid(format!(
                "bias of length {} does not match axis {axis} of {shape:?}",
                self.value(b).len()
            )));
        }
        let ch = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            let bv = bias[i % ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let g = self.grad_of(&[x.0, b.0]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::AddBias {
                x: x.0,
                b: b.0,
                ch,
                inner,
            },
            g,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let g = self.grad_of(&[x.0]);
        self.push(Tensor::from_parts(shape, data), Op::Relu { x: x.0 }, g)
    }

    /// Fingerprint of which inputs every ReLU passed. Two evaluations with
    /// different fingerprints lie on different linear pieces, so a finite
    /// difference between them straddles a kink.
    pub fn relu_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for (i, v) in self.nodes[x].value.data().iter().enumerate() {
                    if *v > 0.0 {
                        h = (h ^ i as u64).wrapping_mul(0x0000_0100_0000_01b3);
                    }
                }
                h = h.rotate_left(17) ^ x as u64;
            }
        }
        h
    }

    /// Inverted dropout: in training, each unit survives with `keep_prob`
    /// and survivors are scaled by `1/keep_prob`. Identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        keep_prob: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(invalid(format!(
                "keep probability {keep_prob} not in (0, 1]"
            )));
        }
        if !train || keep_prob == 1.0 {
            return Ok(x);
        }
        let scale = 1.0 / keep_prob;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < keep_prob {
                    scale
                } else {
                    0.0
                }
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let g = self.grad_of(&[x.0]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Dropout { x: x.0, mask },
            g,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let g = self.grad_of(&[x.0]);
        Ok(self.push(t, Op::Reshape { x: x.0 }, g))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let rank = self.value(x).rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid(format!(
                "{perm:?} is not a permutation of {rank} axes"
            )));
        }
        let (data, shape) = permute_data(self.value(x).data(), self.shape(x), perm);
        let g = self.grad_of(&[x.0]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: x.0,
                perm: perm.to_vec(),
            },
            g,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let g = self.grad_of(&[x.0]);
        self.push(Tensor::from_parts(shape, data), Op::Scale { x: x.0, c }, g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.grad_of(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, g)
    }

    /// Averages over one axis, removing it from the shape (a rank-1 input
    /// collapses to a single-element tensor).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let g = self.grad_of(&[x.0]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MeanAxis {
                x: x.0,
                outer,
                len,
                inner,
            },
            g,
        ))
    }

    /// Convolution along the time axis of an `N×C×T×V` input with a
    /// `C'×C×Kt×1` kernel. Joints are never mixed.
    pub fn temporal_conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[3] != 1 || ws[1] != xs[1] {
            return Err(invalid(format!(
                "temporal_conv expects N×C×T×V input and C'×C×Kt×1 kernel, got {xs:?} and {ws:?}"
            )));
        }
        let kt = ws[2];
        if kt % 2 == 0 {
            return Err(invalid(format!("temporal kernel size {kt} must be odd")));
        }
        if stride == 0 {
            return Err(invalid("temporal stride must be positive"));
        }
        if let Some(b) = bias {
            if self.value(b).len() != ws[0] {
                return Err(invalid(
                    "temporal_conv bias length must equal output channels",
                ));
            }
        }
        let geo = ConvGeometry::new(xs[0], xs[1], xs[2], xs[3], ws[0], kt, stride, pad)?;
        let mut out = vec![0.0; geo.n * geo.c_out * geo.t_out * geo.v];
        let mut col = vec![0.0; geo.col_len()];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for n in 0..geo.n {
            geo.im2col(&xd[n * geo.in_len()..(n + 1) * geo.in_len()], &mut col);
            let o = &mut out[n * geo.out_len()..(n + 1) * geo.out_len()];
            gemm(
                geo.c_out,
                geo.c_in * kt,
                geo.t_out * geo.v,
                wd,
                false,
                &col,
                false,
                o,
                false,
            );
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            let plane = geo.t_out * geo.v;
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bd[i % geo.c_out];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut deps = vec![x.0, w.0];
        deps.extend(bias.map(|b| b.0));
        let g = self.grad_of(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![geo.n, geo.c_out, geo.t_out, geo.v], out),
            Op::TemporalConv {
                x: x.0,
                w: w.0,
                b: bias.map(|b| b.0),
                stride,
                pad,
            },
            g,
        ))
    }

    /// Partitioned spatial graph convolution:
    /// `y[n,:,t,i] = Σ_k W_k · Σ_j A_k[i,j] x[n,:,t,j] (+ bias)`.
    ///
    /// `adj` is either one `K×V×V` stack shared by every sample and frame, or
    /// an `N×T×K×V×V` stack with one adjacency per sample and frame.
    /// `w` is `K×C'×C`.
    pub fn graph_conv(
        &mut self,
        x: Var,
        adj: Arc<Tensor>,
        w: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 3 || ws[2] != xs[1] {
            return Err(invalid(format!(
                "graph_conv expects N×C×T×V input and K×C'×C weights, got {xs:?} and {ws:?}"
            )));
        }
        let (n, c_in, t, v) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, c_out) = (ws[0], ws[1]);
        let agg = Aggregation::new(&adj, n, t, v, k)?;
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(invalid("graph_conv bias length must equal output channels"));
            }
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let plane = t * v;
        let mut out = vec![0.0; n * c_out * plane];
        let wcat = concat_parts(wd, k, c_out, c_in);
        let mut z = vec![0.0; k * c_in * plane];
        for s in 0..n {
            let xs = &xd[s * c_in * plane..(s + 1) * c_in * plane];
            let o = &mut out[s * c_out * plane..(s + 1) * c_out * plane];
            agg.forward(&adj, s, c_in, xs, &mut z);
            gemm(c_out, k * c_in, plane, &wcat, false, &z, false, o, false);
        }
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bd[i % c_out];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut deps = vec![x.0, w.0];
        deps.extend(bias.map(|b| b.0));
        let g = self.grad_of(&deps);
        Ok(self.push(
            Tensor::from_parts(vec![n, c_out, t, v], out),
            Op::GraphConv {
                x: x.0,
                adj,
                w: w.0,
                b: bias.map(|b| b.0),
            },
            g,
        ))
    }

    /// Batch normalization over channel axis 1; statistics pool every other
    /// axis. Train mode normalizes with batch statistics and folds them into
    /// `stats`; eval mode normalizes with `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: NormMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid("batch_norm needs a channel axis"));
        }
        let outer = shape[0];
        let ch = shape[1];
        let inner: usize = shape[2..].iter().product();
        if self.value(gamma).len() != ch || self.value(beta).len() != ch || stats.mean.len() != ch {
            return Err(invalid(format!(
                "batch_norm parameters do not match {ch} channels"
            )));
        }
        let xd = self.value(x).data();
        let count = outer * inner;
        let mut inv_std = vec![0.0; ch];
        let mut shift = vec![0.0; ch];
        let train = mode == NormMode::Train;
        for c in 0..ch {
            if train {
                let mut mean = 0.0;
                for o in 0..outer {
                    mean += xd[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                        .iter()
                        .sum::<f64>();
                }
                mean /= count as f64;
                let mut sq = 0.0;
                for o in 0..outer {
                    sq += xd[(o * ch + c) * inner..(o * ch + c + 1) * inner]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                inv_std[c] = 1.0 / (var + BN_EPS).sqrt();
                shift[c] = mean;
                let unbiased = if count > 1 {
                    sq / (count - 1) as f64
                } else {
                    var
                };
                stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean;
                stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * unbiased;
            } else {
                inv_std[c] = 1.0 / (stats.var[c] + BN_EPS).sqrt();
                shift[c] = stats.mean[c];
            }
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let rows = xd.chunks(inner.max(1)).zip(
            xhat.chunks_mut(inner.max(1))
                .zip(out.chunks_mut(inner.max(1))),
        );
        for (i, (xr, (hr, yr))) in rows.enumerate() {
            let c = i % ch;
            let (m, is, g, b) = (shift[c], inv_std[c], gd[c], bd[c]);
            for ((&xv, h), y) in xr.iter().zip(hr.iter_mut()).zip(yr.iter_mut()) {
                *h = (xv - m) * is;
                *y = g * *h + b;
            }
        }
        let g = self.grad_of(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                ch,
                inner,
                train,
            },
            g,
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`logits`).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(invalid(format!(
                "softmax_cross_entropy expects N×K logits for {} labels, got {shape:?}",
                labels.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} classes")));
        }
        let probs = softmax_rows(self.value(logits).data(), k);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs[i * k + y].ln())
            .sum::<f64>()
            / n as f64;
        let g = self.grad_of(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits: logits.0,
                probs,
                labels: labels.to_vec(),
            },
            g,
        ))
    }

    /// Reverse sweep from a single-element `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(invalid("backward needs a scalar output"));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = slots[idx].take() else {
                continue;
            };
            let flip = self.fault.is_some() && node.op.kind() == self.fault;
            let mut emit = |slot: usize, mut t: Tensor| {
                if !self.nodes[slot].needs_grad {
                    return;
                }
                if flip {
                    t.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(&mut slots[slot], t);
            };
            self.adjoint(node, &g, &mut emit);
            // Leaves keep their accumulated gradient.
            if matches!(node.op, Op::Leaf) {
                slots[idx] = Some(g);
            }
        }
        Ok(Gradients { slots })
    }

    fn adjoint(&self, node: &Node, g: &Tensor, emit: &mut dyn FnMut(usize, Tensor)) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[*a].needs_grad {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, bv.data(), true, &mut da, false);
                    emit(*a, Tensor::from_parts(vec![m, k], da));
                }
                if self.nodes[*b].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, gd, false, &mut db, false);
                    emit(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add { a, b } => {
                emit(*a, g.clone());
                emit(*b, g.clone());
            }
            Op::AddBias { x, b, ch, inner } => {
                emit(*x, g.clone());
                emit(
                    *b,
                    Tensor::from_parts(vec![*ch], channel_sums(gd, *ch, *inner)),
                );
            }
            Op::Relu { x } => {
                let xv = self.nodes[*x].value.data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                emit(*x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                emit(*x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Reshape { x } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                emit(*x, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::Permute { x, perm } => {
                let inv = inverse_permutation(perm);
                let (dx, shape) = permute_data(gd, g.shape(), &inv);
                emit(*x, Tensor::from_parts(shape, dx));
            }
            Op::Scale { x, c } => {
                let dx = gd.iter().map(|v| v * c).collect();
                emit(*x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::Sum { x } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let len = self.nodes[*x].value.len();
                emit(*x, Tensor::from_parts(shape, vec![gd[0]; len]));
            }
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let shape = self.nodes[*x].value.shape().to_vec();
                let inv = 1.0 / *len as f64;
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..*outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                emit(*x, Tensor::from_parts(shape, dx));
            }
            Op::TemporalConv {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (xs, ws) = (xv.shape(), wv.shape());
                let geo =
                    ConvGeometry::new(xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], *stride, *pad)
                        .expect("geometry validated in forward");
                let kdim = geo.c_in * geo.kt;
                let ncol = geo.t_out * geo.v;
                let mut col = vec![0.0; geo.col_len()];
                let want_w = self.nodes[*w].needs_grad;
                let want_x = self.nodes[*x].needs_grad;
                let mut dw = if want_w {
                    vec![0.0; wv.len()]
                } else {
                    Vec::new()
                };
                let mut dx = if want_x {
                    vec![0.0; xv.len()]
                } else {
                    Vec::new()
                };
                let mut dcol = if want_x {
                    vec![0.0; geo.col_len()]
                } else {
                    Vec::new()
                };
                for n in 0..geo.n {
                    let gn = &gd[n * geo.out_len()..(n + 1) * geo.out_len()];
                    if want_w {
                        geo.im2col(
                            &xv.data()[n * geo.in_len()..(n + 1) * geo.in_len()],
                            &mut col,
                        );
                        gemm(geo.c_out, ncol, kdim, gn, false, &col, true, &mut dw, true);
                    }
                    if want_x {
                        gemm(
                            kdim,
                            geo.c_out,
                            ncol,
                            wv.data(),
                            true,
                            gn,
                            false,
                            &mut dcol,
                            false,
                        );
                        geo.col2im(&dcol, &mut dx[n * geo.in_len()..(n + 1) * geo.in_len()]);
                    }
                }
                if want_x {
                    emit(*x, Tensor::from_parts(xs.to_vec(), dx));
                }
                if want_w {
                    emit(*w, Tensor::from_parts(ws.to_vec(), dw));
                }
                if let Some(b) = b {
                    emit(
                        *b,
                        Tensor::from_parts(vec![geo.c_out], channel_sums(gd, geo.c_out, ncol)),
                    );
                }
            }
            Op::GraphConv { x, adj, w, b } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let (n, c_in, t, v) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (k, c_out) = (wv.shape()[0], wv.shape()[1]);
                let agg = Aggregation::new(adj, n, t, v, k).expect("validated in forward");
                let plane = t * v;
                let want_w = self.nodes[*w].needs_grad;
                let want_x = self.nodes[*x].needs_grad;
                let kc = k * c_in;
                let wcat = concat_parts(wv.data(), k, c_out, c_in);
                let mut dwcat = if want_w {
                    vec![0.0; wv.len()]
                } else {
                    Vec::new()
                };
                let mut dx = if want_x {
                    vec![0.0; xv.len()]
                } else {
                    Vec::new()
                };
                let mut z = vec![0.0; kc * plane];
                let mut dz = vec![0.0; kc * plane];
                for s in 0..n {
                    let gs = &gd[s * c_out * plane..(s + 1) * c_out * plane];
                    let xs = &xv.data()[s * c_in * plane..(s + 1) * c_in * plane];
                    if want_w {
                        agg.forward(adj, s, c_in, xs, &mut z);
                        gemm(c_out, plane, kc, gs, false, &z, true, &mut dwcat, true);
                    }
                    if want_x {
                        gemm(kc, c_out, plane, &wcat, true, gs, false, &mut dz, false);
                        agg.backward(
                            adj,
                            s,
                            c_in,
                            &dz,
                            &mut dx[s * c_in * plane..(s + 1) * c_in * plane],
                        );
                    }
                }
                if want_x {
                    emit(*x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if want_w {
                    emit(
                        *w,
                        Tensor::from_parts(
                            wv.shape().to_vec(),
                            split_parts(&dwcat, k, c_out, c_in),
                        ),
                    );
                }
                if let Some(b) = b {
                    emit(
                        *b,
                        Tensor::from_parts(vec![c_out], channel_sums(gd, c_out, plane)),
                    );
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ch,
                inner,
                train,
            } => {
                let (ch, inner) = (*ch, *inner);
                let gamma_v = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for (i, (gr, hr)) in gd
                    .chunks(inner.max(1))
                    .zip(xhat.chunks(inner.max(1)))
                    .enumerate()
                {
                    let c = i % ch;
                    for (gv, h) in gr.iter().zip(hr) {
                        dgamma[c] += gv * h;
                        dbeta[c] += gv;
                    }
                }
                if self.nodes[*x].needs_grad {
                    let count = (gd.len() / ch) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    let rows = gd
                        .chunks(inner.max(1))
                        .zip(xhat.chunks(inner.max(1)))
                        .zip(dx.chunks_mut(inner.max(1)));
                    for (i, ((gr, hr), dr)) in rows.enumerate() {
                        let c = i % ch;
                        let (gm, is) = (gamma_v[c], inv_std[c]);
                        if *train {
                            // dbeta = Σ dy and dgamma = Σ dy·x̂ carry the two
                            // reductions the batch-statistics adjoint needs.
                            let (a, b) = (gm * dbeta[c], gm * dgamma[c]);
                            for ((gv, h), d) in gr.iter().zip(hr).zip(dr.iter_mut()) {
                                *d = is / count * (count * gv * gm - a - h * b);
                            }
                        } else {
                            for (gv, d) in gr.iter().zip(dr.iter_mut()) {
                                *d = gv * gm * is;
                            }
                        }
                    }
                    emit(*x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
                emit(*gamma, Tensor::from_parts(vec![ch], dgamma));
                emit(*beta, Tensor::from_parts(vec![ch], dbeta));
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = gd[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * k + y] -= scale;
                }
                emit(*logits, Tensor::from_parts(vec![n, k], dl));
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(t.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(t),
    }
}

fn channel_sums(g: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels];
    for (i, chunk) in g.chunks(plane.max(1)).enumerate() {
        out[i % channels] += chunk.iter().sum::<f64>();
    }
    out
}

/// Row-wise softmax of a flattened `rows×k` matrix.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// Output length of a strided, padded 1-D convolution.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    n: usize,
    c_in: usize,
    t_in: usize,
    v: usize,
    c_out: usize,
    kt: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    fn new(
        n: usize,
        c_in: usize,
        t_in: usize,
        v: usize,
        c_out: usize,
        kt: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let t_out = conv_output_len(t_in, kt, stride, pad).ok_or_else(|| {
            invalid(format!(
                "kernel {kt} longer than padded input {t_in}+2·{pad}"
            ))
        })?;
        Ok(ConvGeometry {
            n,
            c_in,
            t_in,
            v,
            c_out,
            kt,
            stride,
            pad,
            t_out,
        })
    }

    fn in_len(&self) -> usize {
        self.c_in * self.t_in * self.v
    }

    fn out_len(&self) -> usize {
        self.c_out * self.t_out * self.v
    }

    fn col_len(&self) -> usize {
        self.c_in * self.kt * self.t_out * self.v
    }

    /// Source frame for output frame `to` and tap `k`, if inside the input.
    fn source(&self, to: usize, k: usize) -> Option<usize> {
        let t = (to * self.stride + k) as isize - self.pad as isize;
        (t >= 0 && (t as usize) < self.t_in).then_some(t as usize)
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let v = self.v;
        let row_len = self.t_out * v;
        for c in 0..self.c_in {
            for k in 0..self.kt {
                let row = &mut col[(c * self.kt + k) * row_len..(c * self.kt + k + 1) * row_len];
                for to in 0..self.t_out {
                    let dst = &mut row[to * v..(to + 1) * v];
                    match self.source(to, k) {
                        Some(t) => dst.copy_from_slice(
                            &x[(c * self.t_in + t) * v..(c * self.t_in + t + 1) * v],
                        ),
                        None => dst.fill(0.0),
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let v = self.v;
        let row_len = self.t_out * v;
        for c in 0..self.c_in {
            for k in 0..self.kt {
                let row = &col[(c * self.kt + k) * row_len..(c * self.kt + k + 1) * row_len];
                for to in 0..self.t_out {
                    if let Some(t) = self.source(to, k) {
                        let dst = &mut dx[(c * self.t_in + t) * v..(c * self.t_in + t + 1) * v];
                        for (d, s) in dst.iter_mut().zip(&row[to * v..(to + 1) * v]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Joint aggregation for one partition, over a static or per-frame stack.
struct Aggregation {
    per_frame: bool,
    t: usize,
    v: usize,
    k: usize,
}

impl Aggregation {
    fn new(adj: &Tensor, n: usize, t: usize, v: usize, k: usize) -> Result<Self> {
        let s = adj.shape();
        let per_frame = match s.len() {
            3 if s == [k, v, v] => false,
            5 if s == [n, t, k, v, v] => true,
            _ => {
                return Err(invalid(format!(
                    "adjacency {s:?} does not fit K={k}, V={v} (static) or N={n}, T={t} (per frame)"
                )))
            }
        };
        Ok(Aggregation { per_frame, t, v, k })
    }

    fn matrix<'a>(&self, adj: &'a Tensor, sample: usize, frame: usize, part: usize) -> &'a [f64] {
        let vv = self.v * self.v;
        let off = if self.per_frame {
            ((sample * self.t + frame) * self.k + part) * vv
        } else {
            part * vv
        };
        &adj.data()[off..off + vv]
    }

    /// `z[k,c,t,i] = Σ_j A_k[i,j] x[c,t,j]` for every partition `k`.
    fn forward(&self, adj: &Tensor, sample: usize, channels: usize, x: &[f64], z: &mut [f64]) {
        let v = self.v;
        let plane = channels * self.t * v;
        if !self.per_frame {
            // Rows of x are (c, t) pairs: Z_k = X · A_kᵀ.
            for part in 0..self.k {
                let a = self.matrix(adj, sample, 0, part);
                let zp = &mut z[part * plane..(part + 1) * plane];
                if v == 5 {
                    rows_times::<5>(a, x, zp, false);
                } else {
                    gemm(channels * self.t, v, v, x, false, a, true, zp, false);
                }
            }
            return;
        }
        for t in 0..self.t {
            for part in 0..self.k {
                let a = self.matrix(adj, sample, t, part);
                let zp = &mut z[part * plane..(part + 1) * plane];
                for c in 0..channels {
                    let base = (c * self.t + t) * v;
                    let xr = &x[base..base + v];
                    for (zi, ar) in zp[base..base + v].iter_mut().zip(a.chunks_exact(v)) {
                        *zi = ar.iter().zip(xr).map(|(p, q)| p * q).sum();
                    }
                }
            }
        }
    }

    /// `dx[c,t,j] += Σ_k Σ_i A_k[i,j] dz[k,c,t,i]`
    fn backward(&self, adj: &Tensor, sample: usize, channels: usize, dz: &[f64], dx: &mut [f64]) {
        let v = self.v;
        let plane = channels * self.t * v;
        if !self.per_frame {
            for part in 0..self.k {
                let a = self.matrix(adj, sample, 0, part);
                let dzp = &dz[part * plane..(part + 1) * plane];
                if v == 5 {
                    rows_times::<5>(a, dzp, dx, true);
                } else {
                    gemm(channels * self.t, v, v, dzp, false, a, false, dx, true);
                }
            }
            return;
        }
        for t in 0..self.t {
            for part in 0..self.k {
                let a = self.matrix(adj, sample, t, part);
                let dzp = &dz[part * plane..(part + 1) * plane];
                for c in 0..channels {
                    let base = (c * self.t + t) * v;
                    let dxr = &mut dx[base..base + v];
                    for (ar, &g) in a.chunks_exact(v).zip(&dzp[base..base + v]) {
                        for (d, &aij) in dxr.iter_mut().zip(ar) {
                            *d += aij * g;
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise `y = A·x` (or `y += Aᵀ·x` when `transpose_acc`) for
/// consecutive rows of length `V`.
fn rows_times<const V: usize>(a: &[f64], x: &[f64], y: &mut [f64], transpose_acc: bool) {
    let mut m = [[0.0; V]; V];
    for i in 0..V {
        for j in 0..V {
            m[i][j] = if transpose_acc {
                a[j * V + i]
            } else {
                a[i * V + j]
            };
        }
    }
    for (xr, yr) in x.chunks_exact(V).zip(y.chunks_exact_mut(V)) {
        let xr: &[f64; V] = xr.try_into().unwrap();
        let yr: &mut [f64; V] = yr.try_into().unwrap();
        for i in 0..V {
            let mut acc = 0.0;
            for j in 0..V {
                acc += m[i][j] * xr[j];
            }
            if transpose_acc {
                yr[i] += acc;
            } else {
                yr[i] = acc;
            }
        }
    }
}

/// `K×C'×C` weights as one `C'×(K·C)` matrix.
fn concat_parts(w: &[f64], k: usize, c_out: usize, c_in: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for part in 0..k {
        for o in 0..c_out {
            let src = &w[(part * c_out + o) * c_in..(part * c_out + o + 1) * c_in];
            out[o * k * c_in + part * c_in..o * k * c_in + (part + 1) * c_in].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`concat_parts`].
fn split_parts(wcat: &[f64], k: usize, c_out: usize, c_in: usize) -> Vec<f64> {
    let mut out = vec![0.0; wcat.len()];
    for part in 0..k {
        for o in 0..c_out {
            out[(part * c_out + o) * c_in..(part * c_out + o + 1) * c_in].copy_from_slice(
                &wcat[o * k * c_in + part * c_in..o * k * c_in + (part + 1) * c_in],
            );
        }
    }
    out
}
