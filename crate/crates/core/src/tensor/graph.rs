//! Tape-based reverse-mode automatic differentiation.
//!
//! Every op appends a node to the tape, so tape order is a topological
//! order. `backward` walks the tape once in reverse, accumulating gradients
//! additively across fan-out. Forward outputs are scanned for non-finite
//! values: NaN/Inf is an error state, never a silent value.

use super::kernels::{self, Pad, PadRecord};
use super::{Scalar, Tensor, TensorError};
use crate::rng;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Execution context shared by the whole tape: the global seed plus the
/// train/eval switch and the optimizer step, which key every stochastic
/// mask. Two graphs built with the same context are bit-identical.
#[derive(Clone, Copy, Debug)]
pub struct GraphCtx {
    pub seed: u64,
    pub training: bool,
    pub step: u64,
}

impl GraphCtx {
    pub fn eval() -> Self {
        Self { seed: 0, training: false, step: 0 }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self { seed, training: true, step }
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleConst(Var, f64),
    AddBias { x: Var, bias: Var },
    ScaleChannels { x: Var, scales: Var },
    ScaleRows { x: Var, factors: Var },
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, transpose_b: bool },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Pad2d { x: Var, record: PadRecord },
    Crop2d { x: Var, record: PadRecord },
    DwConv { x: Var, kernel: Var, stride: usize, pad: Pad },
    DwConvT { x: Var, kernel: Var, stride: usize, pad: Pad },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu(Var),
    SoftmaxLast(Var),
    Dropout(Var),
    PrependToken { x: Var, token: Var },
    SelectToken { x: Var, index: usize },
    Rope { x: Var, base: f64 },
    CrossEntropyMean { logits: Var, labels: Vec<usize> },
    SumAll(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleConst(..) => "scale_const",
            Op::AddBias { .. } => "add_bias",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::ScaleRows { .. } => "scale_rows",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Pad2d { .. } => "pad2d",
            Op::Crop2d { .. } => "crop2d",
            Op::DwConv { .. } => "depthwise_conv2d",
            Op::DwConvT { .. } => "depthwise_conv2d_transposed",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxLast(..) => "softmax",
            Op::Dropout(..) => "dropout",
            Op::PrependToken { .. } => "prepend_token",
            Op::SelectToken { .. } => "select_token",
            Op::Rope { .. } => "rope_rotate",
            Op::CrossEntropyMean { .. } => "cross_entropy",
            Op::SumAll(..) => "sum",
        }
    }
}

enum Saved<S> {
    None,
    LayerNorm { means: Vec<S>, rstds: Vec<S> },
    /// Per-element multiplier applied by dropout (0 or 1/(1-p)).
    Mask(Vec<S>),
    /// Softmax probabilities of the cross-entropy logits.
    Probs(Vec<S>),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    requires: bool,
    saved: Saved<S>,
}

/// The tape. Single-writer; one graph per forward/backward pass.
pub struct Graph<S: Scalar> {
    ctx: GraphCtx,
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new(ctx: GraphCtx) -> Self {
        Self { ctx, nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn ctx(&self) -> GraphCtx {
        self.ctx
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a graph input.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires: requires_grad, saved: Saved::None });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never needs a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref()
                .map(|data| Tensor::new(self.nodes[v.0].value.shape().to_vec(), data.clone()).unwrap())
        })
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn push(
        &mut self,
        value: Tensor<S>,
        op: Op,
        requires: bool,
        saved: Saved<S>,
    ) -> Result<Var, TensorError> {
        let node = self.nodes.len();
        if let Some(bad) = value.data().iter().position(|v| !v.is_finite_val()) {
            let _ = bad;
            return Err(TensorError::NonFinite { op: op.name(), node });
        }
        self.nodes.push(Node { value, op, requires, saved });
        Ok(Var(node))
    }

    // ───────────────────────── elementwise ─────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same_shape("add", a, b, |x, y| x.add(y), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same_shape("sub", a, b, |x, y| x.sub(y), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same_shape("mul", a, b, |x, y| x.mul(y), Op::Mul(a, b))
    }

    fn zip_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TensorError::dim(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data: Vec<S> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let req = self.requires(a) || self.requires(b);
        self.push(value, op, req, Saved::None)
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let sc = S::from_f64(c);
        let value = self.nodes[x.0].value.map(|v| v.mul(sc));
        let req = self.requires(x);
        self.push(value, Op::ScaleConst(x, c), req, Saved::None)
    }

    /// `x[..., j] + bias[j]` over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let tb = &self.nodes[bias.0].value;
        let n = *tx.shape().last().ok_or_else(|| TensorError::dim("add_bias", "rank-0 input"))?;
        if tb.shape() != [n] {
            return Err(TensorError::dim(
                "add_bias",
                format!("bias {:?} does not match last axis {n}", tb.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = v.add(tb.data()[i % n]);
        }
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x) || self.requires(bias);
        self.push(value, Op::AddBias { x, bias }, req, Saved::None)
    }

    /// Multiply channel `d` of `x[b, d, ...]` by `scales[d]`.
    pub fn scale_channels(&mut self, x: Var, scales: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let ts = &self.nodes[scales.0].value;
        if tx.rank() < 2 {
            return Err(TensorError::dim("scale_channels", "input rank must be >= 2"));
        }
        let d = tx.shape()[1];
        if ts.shape() != [d] {
            return Err(TensorError::dim(
                "scale_channels",
                format!("scales {:?} vs channel count {d}", ts.shape()),
            ));
        }
        let inner: usize = tx.shape()[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = v.mul(ts.data()[(i / inner) % d]);
        }
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x) || self.requires(scales);
        self.push(value, Op::ScaleChannels { x, scales }, req, Saved::None)
    }

    /// Multiply sample `b` of `x[b, ...]` by `factors[b]`.
    pub fn scale_rows(&mut self, x: Var, factors: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let tf = &self.nodes[factors.0].value;
        if tx.rank() < 1 {
            return Err(TensorError::dim("scale_rows", "input rank must be >= 1"));
        }
        let b = tx.shape()[0];
        if tf.shape() != [b] {
            return Err(TensorError::dim(
                "scale_rows",
                format!("factors {:?} vs batch {b}", tf.shape()),
            ));
        }
        let inner: usize = tx.shape()[1..].iter().product();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v = v.mul(tf.data()[i / inner]);
        }
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x) || self.requires(factors);
        self.push(value, Op::ScaleRows { x, factors }, req, Saved::None)
    }

    // ───────────────────────── linear algebra ─────────────────────────

    /// `a (M x K) * b (K x N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 {
            return Err(TensorError::dim("matmul", "operands must be rank 2"));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::dim(
                "matmul",
                format!("inner dims disagree: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![S::ZERO; m * n];
        S::gemm(m, k, n, S::ONE, ta.data(), tb.data(), S::ZERO, &mut out);
        let value = Tensor::new(vec![m, n], out).unwrap();
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::MatMul { a, b }, req, Saved::None)
    }

    /// Batched matmul over leading group axis: `a (G x M x K)` times
    /// `b (G x K x N)`, or `b (G x N x K)` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 3 || tb.rank() != 3 {
            return Err(TensorError::dim("bmm", "operands must be rank 3"));
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (gb, d1, d2) = (tb.shape()[0], tb.shape()[1], tb.shape()[2]);
        let (kb, n) = if transpose_b { (d2, d1) } else { (d1, d2) };
        if g != gb || k != kb {
            return Err(TensorError::dim(
                "bmm",
                format!("{:?} vs {:?} (transpose_b={transpose_b})", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![S::ZERO; g * m * n];
        for gi in 0..g {
            let asl = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let bsl = &tb.data()[gi * k * n..(gi + 1) * k * n];
            let csl = &mut out[gi * m * n..(gi + 1) * m * n];
            if transpose_b {
                S::gemm_strided(m, k, n, S::ONE, asl, k as isize, 1, bsl, 1, k as isize, S::ZERO, csl, n as isize, 1);
            } else {
                S::gemm(m, k, n, S::ONE, asl, bsl, S::ZERO, csl);
            }
        }
        let value = Tensor::new(vec![g, m, n], out).unwrap();
        let req = self.requires(a) || self.requires(b);
        self.push(value, Op::Bmm { a, b, transpose_b }, req, Saved::None)
    }

    // ───────────────────────── shape ─────────────────────────

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let req = self.requires(x);
        self.push(value, Op::Reshape(x), req, Saved::None)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let rank = tx.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::param(
                "permute",
                format!("axes {axes:?} is not a permutation of 0..{rank}"),
            ));
        }
        let value = permute_copy(tx, axes);
        let req = self.requires(x);
        self.push(value, Op::Permute { x, axes: axes.to_vec() }, req, Saved::None)
    }

    pub fn pad2d(&mut self, x: Var, record: PadRecord) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() < 2 {
            return Err(TensorError::dim("pad2d", "input rank must be >= 2"));
        }
        let (h, w) = (tx.shape()[tx.rank() - 2], tx.shape()[tx.rank() - 1]);
        let maps = tx.numel() / (h * w);
        let data = kernels::pad2d(tx.data(), maps, h, w, record);
        let mut shape = tx.shape().to_vec();
        shape[tx.rank() - 2] = h + record.top + record.bottom;
        shape[tx.rank() - 1] = w + record.left + record.right;
        let value = Tensor::new(shape, data).unwrap();
        let req = self.requires(x);
        self.push(value, Op::Pad2d { x, record }, req, Saved::None)
    }

    pub fn crop2d(&mut self, x: Var, record: PadRecord) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() < 2 {
            return Err(TensorError::dim("crop2d", "input rank must be >= 2"));
        }
        let (h, w) = (tx.shape()[tx.rank() - 2], tx.shape()[tx.rank() - 1]);
        if record.top + record.bottom >= h || record.left + record.right >= w {
            return Err(TensorError::dim("crop2d", format!("crop {record:?} exceeds {h}x{w}")));
        }
        let maps = tx.numel() / (h * w);
        let data = kernels::crop2d(tx.data(), maps, h, w, record);
        let mut shape = tx.shape().to_vec();
        shape[tx.rank() - 2] = h - record.top - record.bottom;
        shape[tx.rank() - 1] = w - record.left - record.right;
        let value = Tensor::new(shape, data).unwrap();
        let req = self.requires(x);
        self.push(value, Op::Crop2d { x, record }, req, Saved::None)
    }

    // ───────────────────────── convolution ─────────────────────────

    /// Depthwise 2D convolution: one kernel per channel, symmetric zero
    /// padding. `x (B x C x H x W)`, `kernel (C x kh x kw)`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: Pad,
    ) -> Result<Var, TensorError> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let (b, c, h, w, kh, kw) = check_conv_shapes("depthwise_conv2d", tx, tk, stride)?;
        let oh = kernels::conv_out_dim(h, kh, stride, pad.h)
            .ok_or_else(|| TensorError::dim("depthwise_conv2d", "kernel larger than padded input"))?;
        let ow = kernels::conv_out_dim(w, kw, stride, pad.w)
            .ok_or_else(|| TensorError::dim("depthwise_conv2d", "kernel larger than padded input"))?;
        let mut out = vec![S::ZERO; b * c * oh * ow];
        kernels::dw_conv2d(tx.data(), b, c, h, w, tk.data(), kh, kw, stride, pad, &mut out);
        let value = Tensor::new(vec![b, c, oh, ow], out).unwrap();
        let req = self.requires(x) || self.requires(kernel);
        self.push(value, Op::DwConv { x, kernel, stride, pad }, req, Saved::None)
    }

    /// Adjoint of [`Graph::depthwise_conv2d`] with the same parameters:
    /// `<conv(u), x> == <u, conv_t(x)>` for all compatible `u`.
    pub fn depthwise_conv2d_transposed(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: Pad,
    ) -> Result<Var, TensorError> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        let (b, c, oh, ow, kh, kw) = check_conv_shapes("depthwise_conv2d_transposed", tx, tk, stride)?;
        let h = ((oh - 1) * stride + kh).checked_sub(2 * pad.h);
        let w = ((ow - 1) * stride + kw).checked_sub(2 * pad.w);
        let (Some(h), Some(w)) = (h, w) else {
            return Err(TensorError::dim("depthwise_conv2d_transposed", "padding exceeds output extent"));
        };
        if h == 0 || w == 0 {
            return Err(TensorError::dim("depthwise_conv2d_transposed", "empty output"));
        }
        let mut out = vec![S::ZERO; b * c * h * w];
        kernels::dw_conv2d_transposed_acc(
            tx.data(), b, c, oh, ow, tk.data(), kh, kw, stride, pad, h, w, &mut out,
        );
        let value = Tensor::new(vec![b, c, h, w], out).unwrap();
        let req = self.requires(x) || self.requires(kernel);
        self.push(value, Op::DwConvT { x, kernel, stride, pad }, req, Saved::None)
    }

    // ───────────────────────── nonlinearities ─────────────────────────

    /// Normalize over the last axis to zero mean, unit variance, then apply
    /// the affine `gamma, beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::param("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let tx = &self.nodes[x.0].value;
        let n = *tx.shape().last().ok_or_else(|| TensorError::dim("layer_norm", "rank-0 input"))?;
        let (tg, tb) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(TensorError::dim(
                "layer_norm",
                format!("gamma {:?} / beta {:?} vs width {n}", tg.shape(), tb.shape()),
            ));
        }
        let mut out = vec![S::ZERO; tx.numel()];
        let (means, rstds) = kernels::layer_norm_rows(tx.data(), n, tg.data(), tb.data(), eps, &mut out);
        let value = Tensor::new(tx.shape().to_vec(), out).unwrap();
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta }, req, Saved::LayerNorm { means, rstds })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.nodes[x.0].value.map(kernels::gelu);
        let req = self.requires(x);
        self.push(value, Op::Gelu(x), req, Saved::None)
    }

    /// Softmax along `axis` (rows sum to one, strictly positive).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let rank = self.nodes[x.0].value.rank();
        if axis >= rank {
            return Err(TensorError::param("softmax", format!("axis {axis} out of range for rank {rank}")));
        }
        if axis == rank - 1 {
            return self.softmax_last(x);
        }
        // Rotate the requested axis to the end, apply, rotate back.
        let mut to_last: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
        to_last.push(axis);
        let mut back = vec![0usize; rank];
        for (i, &a) in to_last.iter().enumerate() {
            back[a] = i;
        }
        let moved = self.permute(x, &to_last)?;
        let soft = self.softmax_last(moved)?;
        self.permute(soft, &back)
    }

    fn softmax_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let n = *tx.shape().last().ok_or_else(|| TensorError::dim("softmax", "rank-0 input"))?;
        let mut out = vec![S::ZERO; tx.numel()];
        kernels::softmax_rows(tx.data(), n, &mut out);
        let value = Tensor::new(tx.shape().to_vec(), out).unwrap();
        let req = self.requires(x);
        self.push(value, Op::SoftmaxLast(x), req, Saved::None)
    }

    /// Inverted dropout. Identity in eval mode; in training, elements are
    /// zeroed with probability `p` and survivors are scaled by `1/(1-p)`.
    /// The mask is a pure function of `(seed, site, step, index)`.
    pub fn dropout(&mut self, x: Var, p: f64, site: u64) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::param("dropout", format!("p must satisfy 0 <= p < 1, got {p}")));
        }
        self.dropout_unchecked(x, p, site)
    }

    /// Dropout that additionally admits `p == 1.0` (drop everything); the
    /// wavelet front-end uses that setting as a reconstruction test hook.
    pub(crate) fn dropout_unchecked(&mut self, x: Var, p: f64, site: u64) -> Result<Var, TensorError> {
        if !self.ctx.training || p == 0.0 {
            return Ok(x);
        }
        let ctx = self.ctx;
        let tx = &self.nodes[x.0].value;
        let keep_scale = if p < 1.0 { S::from_f64(1.0 / (1.0 - p)) } else { S::ZERO };
        let mask: Vec<S> = (0..tx.numel())
            .map(|i| {
                if rng::unit_uniform(ctx.seed, site, ctx.step, i as u64) < p {
                    S::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<S> = tx.data().iter().zip(&mask).map(|(&v, &m)| v.mul(m)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let req = self.requires(x);
        self.push(value, Op::Dropout(x), req, Saved::Mask(mask))
    }

    // ───────────────────────── sequence ─────────────────────────

    /// Prepend a learned token to every sequence: `x (B x S x D)` and
    /// `token (D)` give `(B x (S+1) x D)`.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var, TensorError> {
        let (tx, tt) = (&self.nodes[x.0].value, &self.nodes[token.0].value);
        if tx.rank() != 3 {
            return Err(TensorError::dim("prepend_token", "sequence must be rank 3"));
        }
        let (b, s, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if tt.shape() != [d] {
            return Err(TensorError::dim(
                "prepend_token",
                format!("token {:?} vs embed dim {d}", tt.shape()),
            ));
        }
        let mut data = vec![S::ZERO; b * (s + 1) * d];
        for bi in 0..b {
            let dst = bi * (s + 1) * d;
            data[dst..dst + d].copy_from_slice(tt.data());
            data[dst + d..dst + (s + 1) * d].copy_from_slice(&tx.data()[bi * s * d..(bi + 1) * s * d]);
        }
        let value = Tensor::new(vec![b, s + 1, d], data).unwrap();
        let req = self.requires(x) || self.requires(token);
        self.push(value, Op::PrependToken { x, token }, req, Saved::None)
    }

    /// Extract token `index` from `x (B x S x D)` as `(B x D)`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 3 {
            return Err(TensorError::dim("select_token", "sequence must be rank 3"));
        }
        let (b, s, d) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if index >= s {
            return Err(TensorError::dim("select_token", format!("index {index} vs length {s}")));
        }
        let mut data = vec![S::ZERO; b * d];
        for bi in 0..b {
            data[bi * d..(bi + 1) * d]
                .copy_from_slice(&tx.data()[(bi * s + index) * d..(bi * s + index + 1) * d]);
        }
        let value = Tensor::new(vec![b, d], data).unwrap();
        let req = self.requires(x);
        self.push(value, Op::SelectToken { x, index }, req, Saved::None)
    }

    /// Rotary position embedding over `x (B x heads x S x head_dim)`: the
    /// dimension pair `i` of the token at sequence position `m` is rotated
    /// by `m * base^(-2i/head_dim)`. Position 0 is the identity rotation.
    pub fn rope_rotate(&mut self, x: Var, base: f64) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 4 {
            return Err(TensorError::dim("rope_rotate", "expected (B x heads x S x head_dim)"));
        }
        let (b, heads, s, dh) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        if dh % 2 != 0 {
            return Err(TensorError::param("rope_rotate", format!("head_dim {dh} must be even")));
        }
        let mut data = tx.data().to_vec();
        apply_rope(&mut data, b * heads, s, dh, base, false);
        let value = Tensor::new(vec![b, heads, s, dh], data).unwrap();
        let req = self.requires(x);
        self.push(value, Op::Rope { x, base }, req, Saved::None)
    }

    // ───────────────────────── loss / reduction ─────────────────────────

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = &self.nodes[x.0].value;
        let mut acc = S::ZERO;
        for &v in tx.data() {
            acc = acc.add(v);
        }
        let req = self.requires(x);
        self.push(Tensor::scalar(acc), Op::SumAll(x), req, Saved::None)
    }

    /// Mean cross-entropy of `logits (B x K)` against integer labels:
    /// `-(1/B) * sum_b ln softmax(logits_b)[label_b]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let tl = &self.nodes[logits.0].value;
        if tl.rank() != 2 {
            return Err(TensorError::dim("cross_entropy", "logits must be rank 2"));
        }
        let (b, k) = (tl.shape()[0], tl.shape()[1]);
        if labels.len() != b {
            return Err(TensorError::dim(
                "cross_entropy",
                format!("{} labels for batch {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::param("cross_entropy", format!("label {bad} out of range 0..{k}")));
        }
        let mut probs = vec![S::ZERO; b * k];
        kernels::softmax_rows(tl.data(), k, &mut probs);
        let mut loss = 0.0f64;
        for (bi, &label) in labels.iter().enumerate() {
            loss -= probs[bi * k + label].to_f64().ln();
        }
        loss /= b as f64;
        let req = self.requires(logits);
        self.push(
            Tensor::scalar(S::from_f64(loss)),
            Op::CrossEntropyMean { logits, labels: labels.to_vec() },
            req,
            Saved::Probs(probs),
        )
    }

    // ───────────────────────── backward ─────────────────────────

    /// Populate gradients of every `requires_grad` node reachable from the
    /// scalar `loss`. Visits each tape node exactly once, in reverse
    /// topological (tape) order.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                continue;
            }
            // Parents always precede their child on the tape.
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(gout) = rest[0].as_ref() else { continue };
            let node = &self.nodes[i];
            backprop_node(&self.nodes, node, gout, before);
        }
        Ok(())
    }
}

/// Dispatch one node's backward rule, accumulating into parent grad slots.
fn backprop_node<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    gout: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let val = |v: Var| -> &Tensor<S> { &nodes[v.0].value };
    let wants = |v: Var| nodes[v.0].requires;
    macro_rules! slot {
        ($v:expr) => {
            grads[$v.0].get_or_insert_with(|| vec![S::ZERO; nodes[$v.0].value.numel()])
        };
    }

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for &p in [a, b].iter() {
                if wants(*p) {
                    let g = slot!(*p);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi = gi.add(go);
                    }
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                let g = slot!(*a);
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = gi.add(go);
                }
            }
            if wants(*b) {
                let g = slot!(*b);
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = gi.sub(go);
                }
            }
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                let bd = val(*b).data();
                let g = slot!(*a);
                for ((gi, &go), &bv) in g.iter_mut().zip(gout).zip(bd) {
                    *gi = gi.add(go.mul(bv));
                }
            }
            if wants(*b) {
                let ad = val(*a).data();
                let g = slot!(*b);
                for ((gi, &go), &av) in g.iter_mut().zip(gout).zip(ad) {
                    *gi = gi.add(go.mul(av));
                }
            }
        }
        Op::ScaleConst(x, c) => {
            if wants(*x) {
                let sc = S::from_f64(*c);
                let g = slot!(*x);
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = gi.add(go.mul(sc));
                }
            }
        }
        Op::AddBias { x, bias } => {
            if wants(*x) {
                let g = slot!(*x);
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = gi.add(go);
                }
            }
            if wants(*bias) {
                let n = val(*bias).numel();
                let g = slot!(*bias);
                for (i, &go) in gout.iter().enumerate() {
                    g[i % n] = g[i % n].add(go);
                }
            }
        }
        Op::ScaleChannels { x, scales } => {
            let d = val(*x).shape()[1];
            let inner: usize = val(*x).shape()[2..].iter().product();
            if wants(*x) {
                let sd = val(*scales).data();
                let g = slot!(*x);
                for (i, &go) in gout.iter().enumerate() {
                    g[i] = g[i].add(go.mul(sd[(i / inner) % d]));
                }
            }
            if wants(*scales) {
                let xd = val(*x).data();
                let g = slot!(*scales);
                for (i, &go) in gout.iter().enumerate() {
                    let c = (i / inner) % d;
                    g[c] = g[c].add(go.mul(xd[i]));
                }
            }
        }
        Op::ScaleRows { x, factors } => {
            let inner: usize = val(*x).shape()[1..].iter().product();
            if wants(*x) {
                let fd = val(*factors).data();
                let g = slot!(*x);
                for (i, &go) in gout.iter().enumerate() {
                    g[i] = g[i].add(go.mul(fd[i / inner]));
                }
            }
            if wants(*factors) {
                let xd = val(*x).data();
                let g = slot!(*factors);
                for (i, &go) in gout.iter().enumerate() {
                    let b = i / inner;
                    g[b] = g[b].add(go.mul(xd[i]));
                }
            }
        }
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if wants(*a) {
                // dA = dC * B^T
                let bd = val(*b).data();
                let g = slot!(*a);
                S::gemm_strided(m, n, k, S::ONE, gout, n as isize, 1, bd, 1, n as isize, S::ONE, g, k as isize, 1);
            }
            if wants(*b) {
                // dB = A^T * dC
                let ad = val(*a).data();
                let g = slot!(*b);
                S::gemm_strided(k, m, n, S::ONE, ad, 1, k as isize, gout, n as isize, 1, S::ONE, g, n as isize, 1);
            }
        }
        Op::Bmm { a, b, transpose_b } => {
            let (gg, m, k) = (val(*a).shape()[0], val(*a).shape()[1], val(*a).shape()[2]);
            let n = if *transpose_b { val(*b).shape()[1] } else { val(*b).shape()[2] };
            if wants(*a) {
                let bd = val(*b).data();
                let g = slot!(*a);
                for gi in 0..gg {
                    let go = &gout[gi * m * n..(gi + 1) * m * n];
                    let bs = &bd[gi * k * n..(gi + 1) * k * n];
                    let gs = &mut g[gi * m * k..(gi + 1) * m * k];
                    if *transpose_b {
                        // y = a b^T  =>  da = dy * b
                        S::gemm_strided(m, n, k, S::ONE, go, n as isize, 1, bs, k as isize, 1, S::ONE, gs, k as isize, 1);
                    } else {
                        // da = dy * b^T
                        S::gemm_strided(m, n, k, S::ONE, go, n as isize, 1, bs, 1, n as isize, S::ONE, gs, k as isize, 1);
                    }
                }
            }
            if wants(*b) {
                let ad = val(*a).data();
                let g = slot!(*b);
                for gi in 0..gg {
                    let go = &gout[gi * m * n..(gi + 1) * m * n];
                    let asl = &ad[gi * m * k..(gi + 1) * m * k];
                    let gs = &mut g[gi * k * n..(gi + 1) * k * n];
                    if *transpose_b {
                        // y = a b^T  =>  db = dy^T * a   (db is n x k)
                        S::gemm_strided(n, m, k, S::ONE, go, 1, n as isize, asl, k as isize, 1, S::ONE, gs, k as isize, 1);
                    } else {
                        // db = a^T * dy
                        S::gemm_strided(k, m, n, S::ONE, asl, 1, k as isize, go, n as isize, 1, S::ONE, gs, n as isize, 1);
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if wants(*x) {
                let g = slot!(*x);
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi = gi.add(go);
                }
            }
        }
        Op::Permute { x, axes } => {
            if wants(*x) {
                let out_shape = node.value.shape();
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gt = Tensor::new(out_shape.to_vec(), gout.to_vec()).unwrap();
                let back = permute_copy(&gt, &inverse);
                let g = slot!(*x);
                for (gi, &go) in g.iter_mut().zip(back.data()) {
                    *gi = gi.add(go);
                }
            }
        }
        Op::Pad2d { x, record } => {
            if wants(*x) {
                let (ph, pw) = {
                    let s = node.value.shape();
                    (s[s.len() - 2], s[s.len() - 1])
                };
                let maps = node.value.numel() / (ph * pw);
                let cropped = kernels::crop2d(gout, maps, ph, pw, *record);
                let g = slot!(*x);
                for (gi, &go) in g.iter_mut().zip(&cropped) {
                    *gi = gi.add(go);
                }
            }
        }
        Op::Crop2d { x, record } => {
            if wants(*x) {
                let (ch, cw) = {
                    let s = node.value.shape();
                    (s[s.len() - 2], s[s.len() - 1])
                };
                let maps = node.value.numel() / (ch * cw);
                let padded = kernels::pad2d(gout, maps, ch, cw, *record);
                let g = slot!(*x);
                for (gi, &go) in g.iter_mut().zip(&padded) {
                    *gi = gi.add(go);
                }
            }
        }
        Op::DwConv { x, kernel, stride, pad } => {
            let (b, c, h, w) = shape4(val(*x));
            let (kh, kw) = (val(*kernel).shape()[1], val(*kernel).shape()[2]);
            let (oh, ow) = {
                let s = node.value.shape();
                (s[2], s[3])
            };
            if wants(*x) {
                let kd = val(*kernel).data();
                let g = slot!(*x);
                kernels::dw_conv2d_transposed_acc(gout, b, c, oh, ow, kd, kh, kw, *stride, *pad, h, w, g);
            }
            if wants(*kernel) {
                let xd = val(*x).data();
                let g = slot!(*kernel);
                kernels::dw_conv2d_kernel_grad_acc(xd, b, c, h, w, gout, oh, ow, kh, kw, *stride, *pad, g);
            }
        }
        Op::DwConvT { x, kernel, stride, pad } => {
            let (b, c, oh, ow) = shape4(val(*x));
            let (kh, kw) = (val(*kernel).shape()[1], val(*kernel).shape()[2]);
            let (h, w) = {
                let s = node.value.shape();
                (s[2], s[3])
            };
            if wants(*x) {
                // Adjoint of the adjoint: the forward conv applied to dy.
                let kd = val(*kernel).data();
                let g = slot!(*x);
                let mut tmp = vec![S::ZERO; b * c * oh * ow];
                kernels::dw_conv2d(gout, b, c, h, w, kd, kh, kw, *stride, *pad, &mut tmp);
                for (gi, &t) in g.iter_mut().zip(&tmp) {
                    *gi = gi.add(t);
                }
            }
            if wants(*kernel) {
                // dk[c,i,j] += sum_{b,o} x[b,c,o] * dy[b,c,o*s-p+(i,j)]
                let xd = val(*x).data();
                let g = slot!(*kernel);
                kernels::dw_conv2d_kernel_grad_acc(gout, b, c, h, w, xd, oh, ow, kh, kw, *stride, *pad, g);
            }
        }
        Op::LayerNorm { x, gamma, beta } => {
            let Saved::LayerNorm { means, rstds } = &node.saved else { unreachable!() };
            let n = *val(*x).shape().last().unwrap();
            let xd = val(*x).data();
            let gd = val(*gamma).data();
            // All three grads come out of one pass; route the unwanted ones
            // into scratch space.
            let mut dx_scratch;
            let mut dg_scratch;
            let mut db_scratch;
            // Split mutable access: compute into local buffers, then add.
            dx_scratch = vec![S::ZERO; xd.len()];
            dg_scratch = vec![S::ZERO; n];
            db_scratch = vec![S::ZERO; n];
            kernels::layer_norm_rows_backward(
                xd, n, gd, means, rstds, gout, &mut dx_scratch, &mut dg_scratch, &mut db_scratch,
            );
            if wants(*x) {
                let g = slot!(*x);
                for (gi, &v) in g.iter_mut().zip(&dx_scratch) {
                    *gi = gi.add(v);
                }
            }
            if wants(*gamma) {
                let g = slot!(*gamma);
                for (gi, &v) in g.iter_mut().zip(&dg_scratch) {
                    *gi = gi.add(v);
                }
            }
            if wants(*beta) {
                let g = slot!(*beta);
                for (gi, &v) in g.iter_mut().zip(&db_scratch) {
                    *gi = gi.add(v);
                }
            }
        }
        Op::Gelu(x) => {
            if wants(*x) {
                let xd = val(*x).data();
                let g = slot!(*x);
                for (i, &go) in gout.iter().enumerate() {
                    g[i] = g[i].add(go.mul(kernels::gelu_derivative(xd[i])));
                }
            }
        }
        Op::SoftmaxLast(x) => {
            if wants(*x) {
                let n = *node.value.shape().last().unwrap();
                let g = slot!(*x);
                kernels::softmax_rows_backward(node.value.data(), n, gout, g);
            }
        }
        Op::Dropout(x) => {
            if wants(*x) {
                let Saved::Mask(mask) = &node.saved else { unreachable!() };
                let g = slot!(*x);
                for ((gi, &go), &m) in g.iter_mut().zip(gout).zip(mask) {
                    *gi = gi.add(go.mul(m));
                }
            }
        }
        Op::PrependToken { x, token } => {
            let d = val(*token).numel();
            let (b, s1) = (node.value.shape()[0], node.value.shape()[1]);
            let s = s1 - 1;
            if wants(*x) {
                let g = slot!(*x);
                for bi in 0..b {
                    for si in 0..s {
                        let src = (bi * s1 + si + 1) * d;
                        let dst = (bi * s + si) * d;
                        for j in 0..d {
                            g[dst + j] = g[dst + j].add(gout[src + j]);
                        }
                    }
                }
            }
            if wants(*token) {
                let g = slot!(*token);
                for bi in 0..b {
                    let src = bi * s1 * d;
                    for j in 0..d {
                        g[j] = g[j].add(gout[src + j]);
                    }
                }
            }
        }
        Op::SelectToken { x, index } => {
            if wants(*x) {
                let (_, s, d) = (val(*x).shape()[0], val(*x).shape()[1], val(*x).shape()[2]);
                let b = val(*x).shape()[0];
                let g = slot!(*x);
                for bi in 0..b {
                    let dst = (bi * s + index) * d;
                    for j in 0..d {
                        g[dst + j] = g[dst + j].add(gout[bi * d + j]);
                    }
                }
            }
        }
        Op::Rope { x, base } => {
            if wants(*x) {
                // Rotations are orthogonal: the adjoint is the inverse spin.
                let (b, heads, s, dh) = shape4(val(*x));
                let mut back = gout.to_vec();
                apply_rope(&mut back, b * heads, s, dh, *base, true);
                let g = slot!(*x);
                for (gi, &v) in g.iter_mut().zip(&back) {
                    *gi = gi.add(v);
                }
            }
        }
        Op::CrossEntropyMean { logits, labels } => {
            if wants(*logits) {
                let Saved::Probs(probs) = &node.saved else { unreachable!() };
                let (b, k) = (val(*logits).shape()[0], val(*logits).shape()[1]);
                let go = gout[0];
                let inv_b = S::from_f64(1.0 / b as f64);
                let g = slot!(*logits);
                for bi in 0..b {
                    for ki in 0..k {
                        let mut d = probs[bi * k + ki];
                        if ki == labels[bi] {
                            d = d.sub(S::ONE);
                        }
                        g[bi * k + ki] = g[bi * k + ki].add(go.mul(d).mul(inv_b));
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if wants(*x) {
                let go = gout[0];
                let g = slot!(*x);
                for gi in g.iter_mut() {
                    *gi = gi.add(go);
                }
            }
        }
    }
}

fn shape4<S: Scalar>(t: &Tensor<S>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

fn check_conv_shapes<S: Scalar>(
    op: &'static str,
    x: &Tensor<S>,
    k: &Tensor<S>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize), TensorError> {
    if stride == 0 {
        return Err(TensorError::param(op, "stride must be >= 1"));
    }
    if x.rank() != 4 {
        return Err(TensorError::dim(op, format!("input must be rank 4, got {:?}", x.shape())));
    }
    if k.rank() != 3 {
        return Err(TensorError::dim(op, format!("kernel must be rank 3, got {:?}", k.shape())));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if k.shape()[0] != c {
        return Err(TensorError::dim(
            op,
            format!("one kernel per channel required: {} kernels for {c} channels", k.shape()[0]),
        ));
    }
    Ok((b, c, h, w, k.shape()[1], k.shape()[2]))
}

fn permute_copy<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let rank = t.rank();
    let in_shape = t.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();

    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    // Stride of each *output* axis in the input buffer.
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();

    let numel = t.numel();
    let mut out = vec![S::ZERO; numel];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let data = t.data();
    for slot in out.iter_mut().take(numel) {
        *slot = data[src];
        // Odometer increment over the output index space.
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

use kernels::rope_inplace as apply_rope;

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> Graph<f64> {
        Graph::new(GraphCtx::eval())
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = graph();
        let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector_case() {
        let mut g = graph();
        let p = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let v = g.constant(Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap());
        let y = g.matmul(p, v).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = graph();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = graph();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_self_is_twice_input() {
        let mut g = graph();
        let x = g.leaf(Tensor::new(vec![4], vec![1.0, 2.0, -3.0, 0.25]).unwrap(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, -6.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = graph();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), true);
        let y = g.add(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut g = graph();
        let x = g.constant(Tensor::full(vec![1, 4], 3.7));
        let gamma = g.constant(Tensor::full(vec![4], 2.0));
        let beta = g.constant(Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        // Constant row -> xhat = 0 -> output is exactly beta.
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_are_positive() {
        let mut g = graph();
        let x = g.constant(Tensor::new(vec![2, 3], vec![-1.0, 4.0, 0.5, 100.0, 100.0, -100.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = graph();
        let x = g.constant(Tensor::zeros(vec![1, 3]));
        let y = g.softmax(x, 1).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_over_non_last_axis() {
        let mut g = graph();
        let x = g.constant(Tensor::new(vec![2, 2], vec![0.0, 10.0, 0.0, -10.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        // Columns sum to 1.
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[1] + d[3] - 1.0).abs() < 1e-12);
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!(d[1] > 0.999);
    }

    #[test]
    fn dropout_contract() {
        // p >= 1 is a parameter error.
        let mut g = Graph::<f64>::new(GraphCtx::train(1, 0));
        let x = g.leaf(Tensor::full(vec![100], 1.0), true);
        assert!(matches!(g.dropout(x, 1.0, 7), Err(TensorError::Parameter { .. })));

        // Eval mode: identity (same Var, no new node).
        let mut ge = graph();
        let xe = ge.leaf(Tensor::full(vec![8], 2.0), true);
        let ye = ge.dropout(xe, 0.5, 7).unwrap();
        assert_eq!(xe, ye);

        // Training: kept entries are scaled by 1/(1-p).
        let y = g.dropout(x, 0.25, 7).unwrap();
        let vals = g.value(y).data();
        let kept: Vec<f64> = vals.iter().copied().filter(|v| *v != 0.0).collect();
        assert!(!kept.is_empty());
        for v in &kept {
            assert!((v - 1.0 / 0.75).abs() < 1e-12);
        }

        // Identical context -> identical mask, even with other ops in between.
        let mut g2 = Graph::<f64>::new(GraphCtx::train(1, 0));
        let x2 = g2.leaf(Tensor::full(vec![100], 1.0), true);
        let _noise = g2.gelu(x2).unwrap();
        let y2 = g2.dropout(x2, 0.25, 7).unwrap();
        assert_eq!(g.value(y).data(), g2.value(y2).data());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = graph();
        let x = g.constant(Tensor::full(vec![2], 1e308));
        let err = g.add(x, x);
        assert!(matches!(err, Err(TensorError::NonFinite { op: "add", .. })));
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut g = graph();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.rope_rotate(x, 10_000.0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let mut g = graph();
        let x = g.constant(Tensor::zeros(vec![1, 1, 2, 3]));
        assert!(matches!(g.rope_rotate(x, 10_000.0), Err(TensorError::Parameter { .. })));
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut g = graph();
        let mut rng = crate::rng::SplitMix64::new(5);
        let x = Tensor::from_fn(vec![1, 2, 6, 8], |_| rng.next_normal());
        let xv = g.constant(x.clone());
        let y = g.rope_rotate(xv, 10_000.0).unwrap();
        let yd = g.value(y).data();
        for (xp, yp) in x.data().chunks(2).zip(yd.chunks(2)) {
            let nx = (xp[0] * xp[0] + xp[1] * xp[1]).sqrt();
            let ny = (yp[0] * yp[0] + yp[1] * yp[1]).sqrt();
            assert!((nx - ny).abs() <= 1e-6 * nx.max(1.0));
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = graph();
        let logits = g.constant(Tensor::zeros(vec![2, 6]));
        let loss = g.cross_entropy_mean(logits, &[0, 3]).unwrap();
        assert!((g.value(loss).item() - 6.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_correct_logit() {
        let mut g = graph();
        let mut v = vec![0.0; 6];
        v[0] = 100.0;
        let logits = g.constant(Tensor::new(vec![1, 6], v).unwrap());
        let loss = g.cross_entropy_mean(logits, &[0]).unwrap();
        assert!(g.value(loss).item() <= 1e-6);
    }

    #[test]
    fn cross_entropy_shift_invariance() {
        let mut g = graph();
        let base = vec![0.3, -1.2, 2.0, 0.7];
        let shifted: Vec<f64> = base.iter().map(|v| v + 123.45).collect();
        let a = g.constant(Tensor::new(vec![1, 4], base).unwrap());
        let b = g.constant(Tensor::new(vec![1, 4], shifted).unwrap());
        let la = g.cross_entropy_mean(a, &[2]).unwrap();
        let lb = g.cross_entropy_mean(b, &[2]).unwrap();
        assert!((g.value(la).item() - g.value(lb).item()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = graph();
        let logits = g.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(g.cross_entropy_mean(logits, &[3]), Err(TensorError::Parameter { .. })));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = graph();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn adjoint_identity_conv_vs_transposed() {
        // <conv(x), y> == <x, conv_t(y)> on a random 1x2x6x6 case, stride 2.
        let mut rng = crate::rng::SplitMix64::new(42);
        let x = Tensor::from_fn(vec![1, 2, 6, 6], |_| rng.next_normal());
        let k = Tensor::from_fn(vec![2, 2, 2], |_| rng.next_normal());
        let mut g = graph();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let cx = g.depthwise_conv2d(xv, kv, 2, Pad::default()).unwrap();
        let y = Tensor::from_fn(g.value(cx).shape().to_vec(), |_| rng.next_normal());
        let yv = g.constant(y.clone());
        let cty = g.depthwise_conv2d_transposed(yv, kv, 2, Pad::default()).unwrap();

        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(g.value(cty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut rng = crate::rng::SplitMix64::new(9);
        let (b, c, h, w, kh, kw, stride) = (2, 3, 7, 6, 3, 2, 2);
        let pad = Pad { h: 1, w: 0 };
        let x = Tensor::from_fn(vec![b, c, h, w], |_| rng.next_normal());
        let k = Tensor::from_fn(vec![c, kh, kw], |_| rng.next_normal());

        let mut g = graph();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.depthwise_conv2d(xv, kv, stride, pad).unwrap();

        // Naive oracle: direct quadruple loop with explicit bounds checks.
        let (oh, ow) = (g.shape(y)[2], g.shape(y)[3]);
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride + i) as isize - pad.h as isize;
                                let ix = (ox * stride + j) as isize - pad.w as isize;
                                if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                                    acc += x.data()[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[(ci * kh + i) * kw + j];
                                }
                            }
                        }
                        let got = g.value(y).data()[((bi * c + ci) * oh + oy) * ow + ox];
                        assert_eq!(got, acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_kernel_larger_than_padded_input() {
        let mut g = graph();
        let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let k = g.constant(Tensor::zeros(vec![1, 5, 5]));
        assert!(matches!(
            g.depthwise_conv2d(x, k, 1, Pad { h: 1, w: 1 }),
            Err(TensorError::Dimension { .. })
        ));
    }

    #[test]
    fn forward_backward_is_bit_deterministic() {
        let run = || -> (Vec<u64>, Vec<u64>) {
            let mut rng = crate::rng::SplitMix64::new(77);
            let mut g = Graph::<f64>::new(GraphCtx::train(3, 5));
            let x = g.leaf(Tensor::from_fn(vec![4, 4], |_| rng.next_normal()), true);
            let w = g.leaf(Tensor::from_fn(vec![4, 4], |_| rng.next_normal()), true);
            let h = g.matmul(x, w).unwrap();
            let h = g.gelu(h).unwrap();
            let h = g.dropout(h, 0.3, rng::site_id("t.drop")).unwrap();
            let s = g.sum(h).unwrap();
            g.backward(s).unwrap();
            let out = g.value(s).data().iter().map(|v| v.to_bits()).collect();
            let grads = g.grad(w).unwrap().data().iter().map(|v| v.to_bits()).collect();
            (out, grads)
        };
        assert_eq!(run(), run());
    }
}
