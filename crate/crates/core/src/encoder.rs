//! Token sequence construction, rotary-embedding multi-head attention,
//! pre-norm transformer blocks and the classification head.
//!
//! Blocks follow the pre-norm residual form: attention and feed-forward
//! branches each wrap `LN -> op -> residual add`, gated by stochastic depth
//! during training. RoPE rotates queries and keys only; the class token sits
//! at position 0, which is the identity rotation.

use crate::rng::{self, mix2, site_id, SplitMix64};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Encoder hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub rope_base: f64,
    pub stochastic_depth: f64,
    pub num_classes: usize,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.embed_dim % self.heads != 0 {
            return Err(TensorError::param(
                "encoder_config",
                format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads),
            ));
        }
        if self.head_dim() % 2 != 0 {
            return Err(TensorError::param(
                "encoder_config",
                format!("head_dim {} must be even for rotary pairs", self.head_dim()),
            ));
        }
        if self.layers == 0 || self.num_classes < 2 {
            return Err(TensorError::param("encoder_config", "layers >= 1 and num_classes >= 2 required"));
        }
        if !(0.0..1.0).contains(&self.stochastic_depth) {
            return Err(TensorError::param("encoder_config", "stochastic_depth must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Weight + bias of one affine map, stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct LinearParams<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> LinearParams<S> {
    fn init(fan_in: usize, fan_out: usize, seed: u64, name: &str) -> Self {
        let mut rng = SplitMix64::new(mix2(seed, site_id(name)));
        Self {
            weight: Tensor::randn(vec![fan_in, fan_out], 0.02, &mut rng),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    fn visit<'a>(&'a self, name: &str, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f(format!("{name}.weight"), &self.weight);
        f(format!("{name}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f(format!("{name}.weight"), &mut self.weight);
        f(format!("{name}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams<S> {
    pub ln1_gamma: Tensor<S>,
    pub ln1_beta: Tensor<S>,
    pub q: LinearParams<S>,
    pub k: LinearParams<S>,
    pub v: LinearParams<S>,
    pub o: LinearParams<S>,
    pub ln2_gamma: Tensor<S>,
    pub ln2_beta: Tensor<S>,
    pub ffn1: LinearParams<S>,
    pub ffn2: LinearParams<S>,
}

impl<S: Scalar> BlockParams<S> {
    fn init(cfg: &EncoderConfig, seed: u64, layer: usize) -> Self {
        let d = cfg.embed_dim;
        let name = |part: &str| format!("encoder.b{layer}.{part}");
        Self {
            ln1_gamma: Tensor::full(vec![d], S::ONE),
            ln1_beta: Tensor::zeros(vec![d]),
            q: LinearParams::init(d, d, seed, &name("q")),
            k: LinearParams::init(d, d, seed, &name("k")),
            v: LinearParams::init(d, d, seed, &name("v")),
            o: LinearParams::init(d, d, seed, &name("o")),
            ln2_gamma: Tensor::full(vec![d], S::ONE),
            ln2_beta: Tensor::zeros(vec![d]),
            ffn1: LinearParams::init(d, cfg.ffn_dim, seed, &name("ffn1")),
            ffn2: LinearParams::init(cfg.ffn_dim, d, seed, &name("ffn2")),
        }
    }
}

/// Full encoder parameter set including the class token and head.
#[derive(Clone, Debug)]
pub struct EncoderParams<S> {
    pub class_token: Tensor<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_ln_gamma: Tensor<S>,
    pub final_ln_beta: Tensor<S>,
    pub head: LinearParams<S>,
}

impl<S: Scalar> EncoderParams<S> {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let d = cfg.embed_dim;
        let mut ct_rng = SplitMix64::new(mix2(seed, site_id("encoder.class_token")));
        Self {
            class_token: Tensor::randn(vec![d], 0.02, &mut ct_rng),
            blocks: (0..cfg.layers).map(|l| BlockParams::init(cfg, seed, l)).collect(),
            final_ln_gamma: Tensor::full(vec![d], S::ONE),
            final_ln_beta: Tensor::zeros(vec![d]),
            head: LinearParams::init(d, cfg.num_classes, seed, "head"),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f("encoder.class_token".into(), &self.class_token);
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("encoder.b{l}");
            f(format!("{p}.ln1_gamma"), &b.ln1_gamma);
            f(format!("{p}.ln1_beta"), &b.ln1_beta);
            b.q.visit(&format!("{p}.q"), f);
            b.k.visit(&format!("{p}.k"), f);
            b.v.visit(&format!("{p}.v"), f);
            b.o.visit(&format!("{p}.o"), f);
            f(format!("{p}.ln2_gamma"), &b.ln2_gamma);
            f(format!("{p}.ln2_beta"), &b.ln2_beta);
            b.ffn1.visit(&format!("{p}.ffn1"), f);
            b.ffn2.visit(&format!("{p}.ffn2"), f);
        }
        f("encoder.final_ln_gamma".into(), &self.final_ln_gamma);
        f("encoder.final_ln_beta".into(), &self.final_ln_beta);
        self.head.visit("head", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f("encoder.class_token".into(), &mut self.class_token);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("encoder.b{l}");
            f(format!("{p}.ln1_gamma"), &mut b.ln1_gamma);
            f(format!("{p}.ln1_beta"), &mut b.ln1_beta);
            b.q.visit_mut(&format!("{p}.q"), f);
            b.k.visit_mut(&format!("{p}.k"), f);
            b.v.visit_mut(&format!("{p}.v"), f);
            b.o.visit_mut(&format!("{p}.o"), f);
            f(format!("{p}.ln2_gamma"), &mut b.ln2_gamma);
            f(format!("{p}.ln2_beta"), &mut b.ln2_beta);
            b.ffn1.visit_mut(&format!("{p}.ffn1"), f);
            b.ffn2.visit_mut(&format!("{p}.ffn2"), f);
        }
        f("encoder.final_ln_gamma".into(), &mut self.final_ln_gamma);
        f("encoder.final_ln_beta".into(), &mut self.final_ln_beta);
        self.head.visit_mut("head", f);
    }

    pub fn leaves(&self, g: &mut Graph<S>, trainable: bool) -> EncoderVars {
        let mut vars = Vec::new();
        self.visit(&mut |_, t| vars.push(g.leaf(t.clone(), trainable)));
        let mut it = vars.into_iter();
        EncoderVars::wire(&mut || it.next().unwrap(), self.blocks.len())
    }
}

pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub ffn1: LinearVars,
    pub ffn2: LinearVars,
}

pub struct EncoderVars {
    pub class_token: Var,
    pub blocks: Vec<BlockVars>,
    pub final_ln_gamma: Var,
    pub final_ln_beta: Var,
    pub head: LinearVars,
}

impl EncoderVars {
    /// Rebuild from a var stream in [`EncoderParams::visit`] order.
    pub fn wire(next: &mut impl FnMut() -> Var, layers: usize) -> Self {
        let lin = |next: &mut dyn FnMut() -> Var| LinearVars { weight: next(), bias: next() };
        Self {
            class_token: next(),
            blocks: (0..layers)
                .map(|_| BlockVars {
                    ln1_gamma: next(),
                    ln1_beta: next(),
                    q: lin(next),
                    k: lin(next),
                    v: lin(next),
                    o: lin(next),
                    ln2_gamma: next(),
                    ln2_beta: next(),
                    ffn1: lin(next),
                    ffn2: lin(next),
                })
                .collect(),
            final_ln_gamma: next(),
            final_ln_beta: next(),
            head: lin(next),
        }
    }
}

/// Affine map over the last axis of a rank-2 input.
fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, p: &LinearVars) -> Result<Var, TensorError> {
    let y = g.matmul(x, p.weight)?;
    g.add_bias(y, p.bias)
}

/// Flatten the `B x D x C x N` feature map into `B x (1 + C*N) x D` tokens:
/// token `c*N + n + 1` is the feature column at `(c, n)` (channel-major,
/// time-minor) and token 0 is the class token.
pub fn flatten_tokens<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    class_token: Var,
) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(TensorError::dim("flatten_tokens", format!("expected B x D x C x N, got {shape:?}")));
    }
    let (b, d, c, n) = (shape[0], shape[1], shape[2], shape[3]);
    let seq = g.permute(x, &[0, 2, 3, 1])?; // B x C x N x D
    let seq = g.reshape(seq, vec![b, c * n, d])?;
    g.prepend_token(seq, class_token)
}

/// Bernoulli(1-p) per-sample gate with inverted scaling; identity in eval
/// mode or at p = 0.
fn stochastic_gate<S: Scalar>(
    g: &mut Graph<S>,
    branch: Var,
    p: f64,
    site: u64,
) -> Result<Var, TensorError> {
    let ctx = g.ctx();
    if !ctx.training || p == 0.0 {
        return Ok(branch);
    }
    let b = g.shape(branch)[0];
    let keep = S::from_f64(1.0 / (1.0 - p));
    let factors = Tensor::from_fn(vec![b], |i| {
        if rng::unit_uniform(ctx.seed, site, ctx.step, i as u64) < p {
            S::ZERO
        } else {
            keep
        }
    });
    let fv = g.constant(factors);
    g.scale_rows(branch, fv)
}

/// Multi-head self-attention branch output and its attention probabilities
/// (`B*heads x S x S`). The branch is LN -> QKV -> RoPE on Q,K -> scaled dot
/// product -> softmax -> value mix -> output projection.
pub fn attention_branch<S: Scalar>(
    g: &mut Graph<S>,
    z: Var,
    block: &BlockVars,
    cfg: &EncoderConfig,
    use_rope: bool,
) -> Result<(Var, Var), TensorError> {
    let shape = g.shape(z).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (cfg.heads, cfg.head_dim());

    let normed = g.layer_norm(z, block.ln1_gamma, block.ln1_beta, 1e-5)?;
    let flat = g.reshape(normed, vec![b * s, d])?;

    let split_heads = |g: &mut Graph<S>, p: &LinearVars| -> Result<Var, TensorError> {
        let proj = linear(g, flat, p)?;
        let proj = g.reshape(proj, vec![b, s, h, dh])?;
        g.permute(proj, &[0, 2, 1, 3]) // B x H x S x dh
    };
    let mut q = split_heads(g, &block.q)?;
    let mut k = split_heads(g, &block.k)?;
    let v = split_heads(g, &block.v)?;

    if use_rope {
        q = g.rope_rotate(q, cfg.rope_base)?;
        k = g.rope_rotate(k, cfg.rope_base)?;
    }

    let q = g.reshape(q, vec![b * h, s, dh])?;
    let k = g.reshape(k, vec![b * h, s, dh])?;
    let v = g.reshape(v, vec![b * h, s, dh])?;

    let scores = g.bmm(q, k, true)?;
    let scores = g.scale_const(scores, 1.0 / (dh as f64).sqrt())?;
    let probs = g.softmax(scores, 2)?;
    let mixed = g.bmm(probs, v, false)?;

    let mixed = g.reshape(mixed, vec![b, h, s, dh])?;
    let mixed = g.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = g.reshape(mixed, vec![b * s, d])?;
    let out = linear(g, mixed, &block.o)?;
    let out = g.reshape(out, vec![b, s, d])?;
    Ok((out, probs))
}

/// One pre-norm transformer block: attention and FFN residual branches,
/// each stochastic-depth gated during training.
pub fn transformer_block<S: Scalar>(
    g: &mut Graph<S>,
    z: Var,
    block: &BlockVars,
    cfg: &EncoderConfig,
    use_rope: bool,
    layer: usize,
) -> Result<Var, TensorError> {
    let shape = g.shape(z).to_vec();
    let (b, s, d) = (shape[0], shape[1], shape[2]);

    let (attn, _) = attention_branch(g, z, block, cfg, use_rope)?;
    let attn = stochastic_gate(g, attn, cfg.stochastic_depth, site_id(&format!("sd.b{layer}.attn")))?;
    let z = g.add(z, attn)?;

    let normed = g.layer_norm(z, block.ln2_gamma, block.ln2_beta, 1e-5)?;
    let flat = g.reshape(normed, vec![b * s, d])?;
    let hidden = linear(g, flat, &block.ffn1)?;
    let hidden = g.gelu(hidden)?;
    let out = linear(g, hidden, &block.ffn2)?;
    let ffn = g.reshape(out, vec![b, s, d])?;
    let ffn = stochastic_gate(g, ffn, cfg.stochastic_depth, site_id(&format!("sd.b{layer}.ffn")))?;
    g.add(z, ffn)
}

/// Run every block, extract token 0 and apply the final LayerNorm.
pub fn encode<S: Scalar>(
    g: &mut Graph<S>,
    tokens: Var,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    use_rope: bool,
) -> Result<Var, TensorError> {
    let mut z = tokens;
    for (layer, block) in vars.blocks.iter().enumerate() {
        z = transformer_block(g, z, block, cfg, use_rope, layer)?;
    }
    let class = g.select_token(z, 0)?;
    g.layer_norm(class, vars.final_ln_gamma, vars.final_ln_beta, 1e-5)
}

/// Linear head over the class embedding.
pub fn classify<S: Scalar>(
    g: &mut Graph<S>,
    class_embedding: Var,
    vars: &EncoderVars,
) -> Result<Var, TensorError> {
    linear(g, class_embedding, &vars.head)
}
