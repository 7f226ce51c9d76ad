//! Graph-free inference engine used for deployment-style evaluation and the
//! latency benchmark. The same forward structure runs in FP32 or INT8;
//! quantized mode covers projection/FFN/head matmuls and every depthwise
//! convolution, while softmax, RoPE rotations, LayerNorm and GELU stay in
//! FP32. Eval semantics throughout (no dropout, no stochastic depth).

use crate::model::{Model, ModelConfig};
use crate::quant::{quant_conv_transposed, QuantConv, QuantLinear};
use crate::tensor::kernels::{self, Pad, PadRecord};
use crate::tensor::{Scalar, Tensor};
use crate::wavelet::effective_levels;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Fp32,
    Int8,
}

impl Precision {
    pub fn label(&self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Int8 => "int8",
        }
    }
}

enum LinW {
    F32 { weight: Tensor<f32>, bias: Vec<f32> },
    I8(QuantLinear),
}

impl LinW {
    fn build(weight: &Tensor<f32>, bias: &Tensor<f32>, precision: Precision) -> Self {
        match precision {
            Precision::Fp32 => {
                Self::F32 { weight: weight.clone(), bias: bias.data().to_vec() }
            }
            Precision::Int8 => Self::I8(QuantLinear::from_f32(weight, bias)),
        }
    }

    fn fan_out(&self) -> usize {
        match self {
            Self::F32 { weight, .. } => weight.shape()[1],
            Self::I8(q) => q.fan_out,
        }
    }

    fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        match self {
            Self::F32 { weight, bias } => {
                let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
                debug_assert_eq!(x.len(), rows * fan_in);
                let mut y = vec![0.0f32; rows * fan_out];
                f32::gemm(rows, fan_in, fan_out, 1.0, x, weight.data(), 0.0, &mut y);
                for (i, v) in y.iter_mut().enumerate() {
                    *v += bias[i % fan_out];
                }
                y
            }
            Self::I8(q) => q.forward(x, rows),
        }
    }
}

enum ConvW {
    F32(Tensor<f32>),
    I8(QuantConv),
}

impl ConvW {
    fn build(kernel: &Tensor<f32>, precision: Precision) -> Self {
        match precision {
            Precision::Fp32 => Self::F32(kernel.clone()),
            Precision::Int8 => Self::I8(QuantConv::from_f32(kernel)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &[f32],
        b: usize,
        c: usize,
        h: usize,
        w: usize,
        stride: usize,
        pad: Pad,
    ) -> (Vec<f32>, usize, usize) {
        let kh = match self {
            Self::F32(k) => k.shape()[1],
            Self::I8(q) => q.kh,
        };
        let kw = match self {
            Self::F32(k) => k.shape()[2],
            Self::I8(q) => q.kw,
        };
        let oh = kernels::conv_out_dim(h, kh, stride, pad.h).expect("conv shape");
        let ow = kernels::conv_out_dim(w, kw, stride, pad.w).expect("conv shape");
        let out = match self {
            Self::F32(k) => {
                let mut y = vec![0.0f32; b * c * oh * ow];
                kernels::dw_conv2d(x, b, c, h, w, k.data(), kh, kw, stride, pad, &mut y);
                y
            }
            Self::I8(q) => q.forward(x, b, h, w, stride, (pad.h, pad.w), oh, ow),
        };
        (out, oh, ow)
    }

    /// Stride-2 synthesis direction (pad 0), used by the wavelet path.
    fn forward_transposed(
        &self,
        x: &[f32],
        b: usize,
        c: usize,
        oh: usize,
        ow: usize,
        stride: usize,
    ) -> (Vec<f32>, usize, usize) {
        let (kh, kw) = match self {
            Self::F32(k) => (k.shape()[1], k.shape()[2]),
            Self::I8(q) => (q.kh, q.kw),
        };
        let h = (oh - 1) * stride + kh;
        let w = (ow - 1) * stride + kw;
        let out = match self {
            Self::F32(k) => {
                let mut y = vec![0.0f32; b * c * h * w];
                kernels::dw_conv2d_transposed_acc(
                    x,
                    b,
                    c,
                    oh,
                    ow,
                    k.data(),
                    kh,
                    kw,
                    stride,
                    Pad::default(),
                    h,
                    w,
                    &mut y,
                );
                y
            }
            Self::I8(q) => quant_conv_transposed(q, x, b, oh, ow, stride, h, w),
        };
        (out, h, w)
    }
}

struct InferWavelet {
    dec: [ConvW; 4],
    rec: [ConvW; 4],
    refine: Vec<[ConvW; 4]>,
    scales: Vec<[Vec<f32>; 4]>,
    conv_base: ConvW,
}

struct InferBlock {
    ln1_gamma: Vec<f32>,
    ln1_beta: Vec<f32>,
    q: LinW,
    k: LinW,
    v: LinW,
    o: LinW,
    ln2_gamma: Vec<f32>,
    ln2_beta: Vec<f32>,
    ffn1: LinW,
    ffn2: LinW,
}

/// A model frozen for inference at a chosen precision.
pub struct InferModel {
    cfg: ModelConfig,
    precision: Precision,
    patch_proj: LinW,
    patch_ln_gamma: Vec<f32>,
    patch_ln_beta: Vec<f32>,
    wavelet: Option<InferWavelet>,
    class_token: Vec<f32>,
    blocks: Vec<InferBlock>,
    final_ln_gamma: Vec<f32>,
    final_ln_beta: Vec<f32>,
    head: LinW,
}

impl InferModel {
    pub fn from_model(m: &Model<f32>, precision: Precision) -> Self {
        let f = |t: &Tensor<f32>| t.data().to_vec();
        let wavelet = m.wavelet.as_ref().map(|w| InferWavelet {
            dec: std::array::from_fn(|b| ConvW::build(&w.dec[b], precision)),
            rec: std::array::from_fn(|b| ConvW::build(&w.rec[b], precision)),
            refine: w
                .refine
                .iter()
                .map(|r| std::array::from_fn(|b| ConvW::build(&r[b], precision)))
                .collect(),
            scales: w
                .scales
                .iter()
                .map(|s| std::array::from_fn(|b| f(&s[b])))
                .collect(),
            conv_base: ConvW::build(&w.conv_base, precision),
        });
        Self {
            cfg: m.config.clone(),
            precision,
            patch_proj: LinW::build(&m.patch.proj, &m.patch.bias, precision),
            patch_ln_gamma: f(&m.patch.ln_gamma),
            patch_ln_beta: f(&m.patch.ln_beta),
            wavelet,
            class_token: f(&m.encoder.class_token),
            blocks: m
                .encoder
                .blocks
                .iter()
                .map(|b| InferBlock {
                    ln1_gamma: f(&b.ln1_gamma),
                    ln1_beta: f(&b.ln1_beta),
                    q: LinW::build(&b.q.weight, &b.q.bias, precision),
                    k: LinW::build(&b.k.weight, &b.k.bias, precision),
                    v: LinW::build(&b.v.weight, &b.v.bias, precision),
                    o: LinW::build(&b.o.weight, &b.o.bias, precision),
                    ln2_gamma: f(&b.ln2_gamma),
                    ln2_beta: f(&b.ln2_beta),
                    ffn1: LinW::build(&b.ffn1.weight, &b.ffn1.bias, precision),
                    ffn2: LinW::build(&b.ffn2.weight, &b.ffn2.bias, precision),
                })
                .collect(),
            final_ln_gamma: f(&m.encoder.final_ln_gamma),
            final_ln_beta: f(&m.encoder.final_ln_beta),
            head: LinW::build(&m.encoder.head.weight, &m.encoder.head.bias, precision),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Eval-mode logits for a `B x C x T` batch.
    pub fn logits(&self, batch: &Tensor<f32>) -> Tensor<f32> {
        let shape = batch.shape();
        assert_eq!(shape.len(), 3, "expected B x C x T");
        let (b, c, t_in) = (shape[0], shape[1], shape[2]);
        let pc = self.cfg.patch_config();
        let t = pc.padded_window();
        let n = pc.num_patches();
        let d = self.cfg.embed_dim;

        // Crop or zero-pad the time axis.
        let mut x = vec![0.0f32; b * c * t];
        let copy = t_in.min(self.cfg.window);
        for row in 0..b * c {
            x[row * t..row * t + copy].copy_from_slice(&batch.data()[row * t_in..row * t_in + copy]);
        }

        // Patch projection: rows are (b, c, n) patches of width P.
        let rows = b * c * n;
        let mut h = self.patch_proj.forward(&x, rows);
        kernels_layer_norm(&mut h, d, &self.patch_ln_gamma, &self.patch_ln_beta);
        for v in h.iter_mut() {
            *v = kernels::gelu(*v);
        }

        // (B, C, N, D) -> (B, D, C, N)
        let mut fm = vec![0.0f32; b * d * c * n];
        for bi in 0..b {
            for ci in 0..c {
                for ni in 0..n {
                    for di in 0..d {
                        fm[((bi * d + di) * c + ci) * n + ni] =
                            h[((bi * c + ci) * n + ni) * d + di];
                    }
                }
            }
        }

        let fm = match &self.wavelet {
            Some(w) => self.wavelet_forward(w, fm, b, d, c, n),
            None => fm,
        };

        // Flatten to tokens (B, 1+S, D) with the class token in front.
        let s1 = 1 + c * n;
        let mut z = vec![0.0f32; b * s1 * d];
        for bi in 0..b {
            z[bi * s1 * d..bi * s1 * d + d].copy_from_slice(&self.class_token);
            for ci in 0..c {
                for ni in 0..n {
                    let tok = ci * n + ni + 1;
                    for di in 0..d {
                        z[(bi * s1 + tok) * d + di] = fm[((bi * d + di) * c + ci) * n + ni];
                    }
                }
            }
        }

        for block in &self.blocks {
            self.block_forward(block, &mut z, b, s1, d);
        }

        // Token 0 -> final LN -> head.
        let mut cls = vec![0.0f32; b * d];
        for bi in 0..b {
            cls[bi * d..(bi + 1) * d].copy_from_slice(&z[bi * s1 * d..bi * s1 * d + d]);
        }
        kernels_layer_norm(&mut cls, d, &self.final_ln_gamma, &self.final_ln_beta);
        let logits = self.head.forward(&cls, b);
        Tensor::new(vec![b, self.head.fan_out()], logits).unwrap()
    }

    fn wavelet_forward(
        &self,
        w: &InferWavelet,
        fm: Vec<f32>,
        b: usize,
        d: usize,
        gh: usize,
        gw: usize,
    ) -> Vec<f32> {
        let (levels, _) = effective_levels(self.cfg.levels.min(w.refine.len()), gh, gw);
        let maps = b * d;

        let mut approx = fm.clone();
        let (mut h, mut wdim) = (gh, gw);
        let mut stash: Vec<([Vec<f32>; 3], usize, usize, PadRecord)> = Vec::new();
        for level in 0..levels {
            let pad = PadRecord { top: 0, bottom: h % 2, left: 0, right: wdim % 2 };
            let padded = if pad.is_zero() {
                approx
            } else {
                kernels::pad2d(&approx, maps, h, wdim, pad)
            };
            let (ph, pw) = (h + pad.bottom, wdim + pad.right);
            let mut bands: Vec<Vec<f32>> = Vec::with_capacity(4);
            let (mut oh, mut ow) = (0, 0);
            for band in 0..4 {
                let (y, yh, yw) = w.dec[band].forward(&padded, b, d, ph, pw, 2, Pad::default());
                oh = yh;
                ow = yw;
                let (refined, _, _) =
                    w.refine[level][band].forward(&y, b, d, yh, yw, 1, Pad { h: 1, w: 1 });
                let mut refined = refined;
                scale_channels(&mut refined, b, d, yh * yw, &w.scales[level][band]);
                bands.push(refined);
            }
            let hh = bands.pop().unwrap();
            let hl = bands.pop().unwrap();
            let lh = bands.pop().unwrap();
            approx = bands.pop().unwrap();
            stash.push(([lh, hl, hh], oh, ow, pad));
            h = oh;
            wdim = ow;
        }

        let mut recon = approx;
        for ([lh, hl, hh], oh, ow, pad) in stash.into_iter().rev() {
            let (mut sum, rh, rw) = w.rec[0].forward_transposed(&recon, b, d, oh, ow, 2);
            for (band, data) in [(1usize, &lh), (2, &hl), (3, &hh)] {
                let (part, _, _) = w.rec[band].forward_transposed(data, b, d, oh, ow, 2);
                for (s, p) in sum.iter_mut().zip(&part) {
                    *s += p;
                }
            }
            recon = if pad.is_zero() {
                sum
            } else {
                kernels::crop2d(&sum, maps, rh, rw, pad)
            };
        }

        let (base, _, _) = w.conv_base.forward(&fm, b, d, gh, gw, 1, Pad { h: 1, w: 1 });
        base.iter().zip(&recon).map(|(a, r)| a + r).collect()
    }

    fn block_forward(&self, block: &InferBlock, z: &mut Vec<f32>, b: usize, s: usize, d: usize) {
        let heads = self.cfg.heads;
        let dh = d / heads;
        let rows = b * s;

        // Attention branch.
        let mut normed = z.clone();
        kernels_layer_norm(&mut normed, d, &block.ln1_gamma, &block.ln1_beta);
        let q = block.q.forward(&normed, rows);
        let k = block.k.forward(&normed, rows);
        let v = block.v.forward(&normed, rows);

        // (B, S, H, dh) -> (B, H, S, dh)
        let to_heads = |m: &[f32]| -> Vec<f32> {
            let mut out = vec![0.0f32; b * heads * s * dh];
            for bi in 0..b {
                for si in 0..s {
                    for hi in 0..heads {
                        let src = ((bi * s + si) * heads + hi) * dh;
                        let dst = ((bi * heads + hi) * s + si) * dh;
                        out[dst..dst + dh].copy_from_slice(&m[src..src + dh]);
                    }
                }
            }
            out
        };
        let mut qh = to_heads(&q);
        let mut kh = to_heads(&k);
        let vh = to_heads(&v);
        if self.cfg.use_rope {
            kernels::rope_inplace(&mut qh, b * heads, s, dh, self.cfg.rope_base, false);
            kernels::rope_inplace(&mut kh, b * heads, s, dh, self.cfg.rope_base, false);
        }

        // Scores, softmax and value mix stay in f32.
        let scale = 1.0 / (dh as f32).sqrt();
        let mut mixed = vec![0.0f32; b * heads * s * dh];
        let mut scores = vec![0.0f32; s * s];
        for g in 0..b * heads {
            let qs = &qh[g * s * dh..(g + 1) * s * dh];
            let ks = &kh[g * s * dh..(g + 1) * s * dh];
            let vs = &vh[g * s * dh..(g + 1) * s * dh];
            f32::gemm_strided(
                s, dh, s, scale, qs, dh as isize, 1, ks, 1, dh as isize, 0.0, &mut scores,
                s as isize, 1,
            );
            let mut probs = vec![0.0f32; s * s];
            kernels::softmax_rows(&scores, s, &mut probs);
            f32::gemm(
                s,
                s,
                dh,
                1.0,
                &probs,
                vs,
                0.0,
                &mut mixed[g * s * dh..(g + 1) * s * dh],
            );
        }

        // (B, H, S, dh) -> (B, S, D), output projection, residual.
        let mut merged = vec![0.0f32; rows * d];
        for bi in 0..b {
            for hi in 0..heads {
                for si in 0..s {
                    let src = ((bi * heads + hi) * s + si) * dh;
                    let dst = (bi * s + si) * d + hi * dh;
                    merged[dst..dst + dh].copy_from_slice(&mixed[src..src + dh]);
                }
            }
        }
        let attn = block.o.forward(&merged, rows);
        for (zi, ai) in z.iter_mut().zip(&attn) {
            *zi += ai;
        }

        // FFN branch.
        let mut normed = z.clone();
        kernels_layer_norm(&mut normed, d, &block.ln2_gamma, &block.ln2_beta);
        let mut hidden = block.ffn1.forward(&normed, rows);
        for v in hidden.iter_mut() {
            *v = kernels::gelu(*v);
        }
        let out = block.ffn2.forward(&hidden, rows);
        for (zi, oi) in z.iter_mut().zip(&out) {
            *zi += oi;
        }
    }
}

fn kernels_layer_norm(x: &mut [f32], width: usize, gamma: &[f32], beta: &[f32]) {
    let mut out = vec![0.0f32; x.len()];
    kernels::layer_norm_rows(x, width, gamma, beta, 1e-5, &mut out);
    x.copy_from_slice(&out);
}

fn scale_channels(x: &mut [f32], b: usize, d: usize, inner: usize, scales: &[f32]) {
    for bi in 0..b {
        for di in 0..d {
            let off = (bi * d + di) * inner;
            let s = scales[di];
            for v in &mut x[off..off + inner] {
                *v *= s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn test_config() -> ModelConfig {
        ModelConfig {
            channels: 3,
            window: 80,
            patch_width: 20,
            embed_dim: 16,
            levels: 2,
            hf_dropout: 0.1,
            layers: 2,
            heads: 4,
            ffn_dim: 32,
            rope_base: 10_000.0,
            stochastic_depth: 0.1,
            num_classes: 4,
            use_waveletconv: true,
            use_rope: true,
        }
    }

    #[test]
    fn fp32_engine_matches_graph_forward() {
        let (mut model, _) = Model::<f32>::init(test_config(), 17).unwrap();
        // Nudge the bank off its identity init so the wavelet path is
        // non-trivial in both implementations.
        let mut rng = SplitMix64::new(18);
        if let Some(w) = &mut model.wavelet {
            w.visit_mut(&mut |_, t| {
                for v in t.data_mut() {
                    *v += 0.05 * rng.next_normal() as f32;
                }
            });
        }

        let batch = Tensor::from_fn(vec![4, 3, 80], |_| rng.next_normal() as f32);
        let via_graph = model.predict_logits(&batch).unwrap();
        let engine = InferModel::from_model(&model, Precision::Fp32);
        let via_engine = engine.logits(&batch);
        assert_eq!(via_graph.shape(), via_engine.shape());
        let diff = via_graph.max_abs_diff(&via_engine);
        assert!(diff <= 1e-4, "fp32 engine drifted from graph by {diff}");
    }

    #[test]
    fn fp32_engine_handles_crop_and_pad() {
        let (model, _) = Model::<f32>::init(test_config(), 21).unwrap();
        let engine = InferModel::from_model(&model, Precision::Fp32);
        let mut rng = SplitMix64::new(22);
        // Longer input gets cropped; shorter gets zero-padded.
        let long = Tensor::from_fn(vec![1, 3, 100], |_| rng.next_normal() as f32);
        let short = Tensor::from_fn(vec![1, 3, 50], |_| rng.next_normal() as f32);
        assert_eq!(engine.logits(&long).shape(), &[1, 4]);
        assert_eq!(engine.logits(&short).shape(), &[1, 4]);

        let via_graph_long = model.predict_logits(&long).unwrap();
        assert!(via_graph_long.max_abs_diff(&engine.logits(&long)) <= 1e-4);
    }

    #[test]
    fn int8_engine_stays_near_fp32() {
        let (model, _) = Model::<f32>::init(test_config(), 23).unwrap();
        let fp32 = InferModel::from_model(&model, Precision::Fp32);
        let int8 = InferModel::from_model(&model, Precision::Int8);
        let mut rng = SplitMix64::new(24);
        let batch = Tensor::from_fn(vec![8, 3, 80], |_| rng.next_normal() as f32);
        let a = fp32.logits(&batch);
        let q = int8.logits(&batch);
        assert_eq!(a.shape(), q.shape());
        assert!(q.data().iter().all(|v| v.is_finite()));
        // Bounded perturbation: untrained logits live near zero, so only a
        // loose absolute band is meaningful here; the trained-model fidelity
        // gate lives in the acceptance suite.
        let diff = a.max_abs_diff(&q);
        assert!(diff <= 0.25, "int8 drifted from fp32 by {diff}");
    }

    #[test]
    fn engines_skip_wavelet_under_ablation() {
        let cfg = ModelConfig { use_waveletconv: false, ..test_config() };
        let (model, _) = Model::<f32>::init(cfg, 25).unwrap();
        let engine = InferModel::from_model(&model, Precision::Fp32);
        let mut rng = SplitMix64::new(26);
        let batch = Tensor::from_fn(vec![2, 3, 80], |_| rng.next_normal() as f32);
        let via_graph = model.predict_logits(&batch).unwrap();
        assert!(via_graph.max_abs_diff(&engine.logits(&batch)) <= 1e-4);
    }
}
