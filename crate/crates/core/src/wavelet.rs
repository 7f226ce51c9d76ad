//! Patch embedding and the learnable wavelet convolution.
//!
//! The feature map is `B x D x C x N` with the embedding dim `D` as the
//! depthwise channel and the `(signal channels, temporal patches)` grid as
//! the 2D spatial extent. Subband naming fixes `LH` = low-pass across the
//! channel axis / high-pass across the time axis, and `HL` the reverse.
//!
//! The wavelet path decomposes the low-frequency chain level by level,
//! refines every subband with a delta-initialized 3x3 depthwise conv and a
//! per-channel scale, optionally drops high-frequency subbands during
//! training, then reconstructs back up the chain. With the orthonormal Haar
//! initialization the whole path is the identity map in eval mode, which is
//! what the reconstruction suites pin down.

use crate::rng::{mix2, site_id, SplitMix64};
use crate::tensor::kernels::{Pad, PadRecord};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Patch embedding geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub channels: usize,
    /// Window length `T`; inputs are cropped or zero-padded to this.
    pub window: usize,
    pub patch_width: usize,
    pub embed_dim: usize,
}

impl PatchConfig {
    /// `T` rounded up to a whole number of patches.
    pub fn padded_window(&self) -> usize {
        self.num_patches() * self.patch_width
    }

    pub fn num_patches(&self) -> usize {
        self.window.div_ceil(self.patch_width)
    }
}

/// Patch embedding parameters: a `(1, P)`-kernel convolution expressed as a
/// per-patch linear map, plus the LayerNorm affine that follows it.
#[derive(Clone, Debug)]
pub struct PatchEmbed<S> {
    pub proj: Tensor<S>,
    pub bias: Tensor<S>,
    pub ln_gamma: Tensor<S>,
    pub ln_beta: Tensor<S>,
}

impl<S: Scalar> PatchEmbed<S> {
    pub fn init(cfg: &PatchConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(mix2(seed, site_id("patch.proj")));
        Self {
            proj: Tensor::randn(vec![cfg.patch_width, cfg.embed_dim], 0.02, &mut rng),
            bias: Tensor::zeros(vec![cfg.embed_dim]),
            ln_gamma: Tensor::full(vec![cfg.embed_dim], S::ONE),
            ln_beta: Tensor::zeros(vec![cfg.embed_dim]),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        f("patch.proj".into(), &self.proj);
        f("patch.bias".into(), &self.bias);
        f("patch.ln_gamma".into(), &self.ln_gamma);
        f("patch.ln_beta".into(), &self.ln_beta);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        f("patch.proj".into(), &mut self.proj);
        f("patch.bias".into(), &mut self.bias);
        f("patch.ln_gamma".into(), &mut self.ln_gamma);
        f("patch.ln_beta".into(), &mut self.ln_beta);
    }

    pub fn leaves(&self, g: &mut Graph<S>, trainable: bool) -> PatchEmbedVars {
        let mut vars = Vec::new();
        self.visit(&mut |_, t| vars.push(g.leaf(t.clone(), trainable)));
        let mut it = vars.into_iter();
        PatchEmbedVars::wire(&mut || it.next().unwrap())
    }
}

/// Graph-side handles of [`PatchEmbed`].
pub struct PatchEmbedVars {
    pub proj: Var,
    pub bias: Var,
    pub ln_gamma: Var,
    pub ln_beta: Var,
}

impl PatchEmbedVars {
    /// Rebuild from a var stream in [`PatchEmbed::visit`] order.
    pub fn wire(next: &mut impl FnMut() -> Var) -> Self {
        Self { proj: next(), bias: next(), ln_gamma: next(), ln_beta: next() }
    }
}

/// Embed `x (B x C x T')` into the `B x D x C x N` feature map: crop/pad the
/// time axis to the configured window, project each non-overlapping width-P
/// patch to D dims, LayerNorm over D, GELU, and move D in front.
pub fn patch_embed<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    vars: &PatchEmbedVars,
    cfg: &PatchConfig,
) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::dim("patch_embed", format!("expected B x C x T, got {shape:?}")));
    }
    let (b, c, t_in) = (shape[0], shape[1], shape[2]);
    if t_in < cfg.patch_width {
        return Err(TensorError::dim(
            "patch_embed",
            format!("window of {t_in} samples is shorter than one patch ({})", cfg.patch_width),
        ));
    }
    let t = cfg.padded_window();
    let n = cfg.num_patches();

    // Crop or zero-pad the trailing time axis to exactly `t` samples.
    let mut x = g.reshape(x, vec![b, c, 1, t_in])?;
    if t_in > cfg.window {
        x = g.crop2d(x, PadRecord { right: t_in - cfg.window, ..Default::default() })?;
    }
    let cur = t_in.min(cfg.window);
    if cur < t {
        x = g.pad2d(x, PadRecord { right: t - cur, ..Default::default() })?;
    }

    let flat = g.reshape(x, vec![b * c * n, cfg.patch_width])?;
    let proj = g.matmul(flat, vars.proj)?;
    let proj = g.add_bias(proj, vars.bias)?;
    let normed = g.layer_norm(proj, vars.ln_gamma, vars.ln_beta, 1e-5)?;
    let act = g.gelu(normed)?;
    let grid = g.reshape(act, vec![b, c, n, cfg.embed_dim])?;
    g.permute(grid, &[0, 3, 1, 2])
}

/// Wavelet front-end hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveletConfig {
    /// Requested decomposition depth; clamped to what the map supports.
    pub levels: usize,
    /// Selective dropout probability on LH/HL/HH during training.
    pub hf_dropout: f64,
}

impl Default for WaveletConfig {
    fn default() -> Self {
        Self { levels: 3, hf_dropout: 0.1 }
    }
}

/// Deepest decomposition the `(h, w)` grid supports with per-level padding:
/// `min(levels, floor(log2(min(h, w))) + 1)`. Returns the effective depth
/// and whether clamping occurred.
pub fn effective_levels(levels: usize, h: usize, w: usize) -> (usize, bool) {
    let m = h.min(w).max(1);
    let reachable = (usize::BITS - 1 - m.leading_zeros()) as usize + 1;
    let eff = levels.min(reachable).max(1);
    (eff, eff < levels)
}

pub const BAND_NAMES: [&str; 4] = ["ll", "lh", "hl", "hh"];

/// Learnable filter bank: four 2x2 analysis and four synthesis kernels per
/// feature channel, per-level 3x3 refinement kernels and per-channel scales
/// for every subband, and the residual depthwise base conv.
#[derive(Clone, Debug)]
pub struct WaveletParams<S> {
    pub dec: [Tensor<S>; 4],
    pub rec: [Tensor<S>; 4],
    /// `refine[level][band]`, delta-initialized.
    pub refine: Vec<[Tensor<S>; 4]>,
    /// `scales[level][band]`, ones-initialized.
    pub scales: Vec<[Tensor<S>; 4]>,
    pub conv_base: Tensor<S>,
}

/// Orthonormal Haar tensor-product kernel, entries +-1/2. Band index order
/// is LL, LH, HL, HH; the first letter describes the channel (H) axis.
fn haar_kernel<S: Scalar>(dim: usize, band: usize) -> Tensor<S> {
    let lo = [0.5f64, 0.5];
    let hi = [0.5f64, -0.5];
    let (fh, fw) = match band {
        0 => (lo, lo),
        1 => (lo, hi),
        2 => (hi, lo),
        _ => (hi, hi),
    };
    // Entries are (f_h[i]/sqrt(2)') x (f_w[j]') tensor products; with the
    // 1/sqrt(2)-normalized 1D factors they come out as 2 * fh * fw = +-1/2.
    Tensor::from_fn(vec![dim, 2, 2], |i| {
        let j = i % 4;
        S::from_f64(2.0 * fh[j / 2] * fw[j % 2])
    })
}

fn delta_kernel<S: Scalar>(dim: usize, k: usize) -> Tensor<S> {
    let center = (k / 2) * k + k / 2;
    Tensor::from_fn(vec![dim, k, k], |i| if i % (k * k) == center { S::ONE } else { S::ZERO })
}

impl<S: Scalar> WaveletParams<S> {
    /// Haar analysis/synthesis, delta refinements, unit scales, delta base:
    /// the module starts out as exactly `x + x`.
    pub fn init(embed_dim: usize, levels: usize) -> Self {
        let band = |b| haar_kernel::<S>(embed_dim, b);
        Self {
            dec: [band(0), band(1), band(2), band(3)],
            rec: [band(0), band(1), band(2), band(3)],
            refine: (0..levels)
                .map(|_| std::array::from_fn(|_| delta_kernel(embed_dim, 3)))
                .collect(),
            scales: (0..levels)
                .map(|_| std::array::from_fn(|_| Tensor::full(vec![embed_dim], S::ONE)))
                .collect(),
            conv_base: delta_kernel(embed_dim, 3),
        }
    }

    pub fn levels(&self) -> usize {
        self.refine.len()
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<S>)) {
        for (b, name) in BAND_NAMES.iter().enumerate() {
            f(format!("wavelet.dec_{name}"), &self.dec[b]);
        }
        for (b, name) in BAND_NAMES.iter().enumerate() {
            f(format!("wavelet.rec_{name}"), &self.rec[b]);
        }
        for (level, (refine, scales)) in self.refine.iter().zip(&self.scales).enumerate() {
            for (b, name) in BAND_NAMES.iter().enumerate() {
                f(format!("wavelet.l{level}.refine_{name}"), &refine[b]);
                f(format!("wavelet.l{level}.scale_{name}"), &scales[b]);
            }
        }
        f("wavelet.conv_base".into(), &self.conv_base);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<S>)) {
        for (b, name) in BAND_NAMES.iter().enumerate() {
            f(format!("wavelet.dec_{name}"), &mut self.dec[b]);
        }
        for (b, name) in BAND_NAMES.iter().enumerate() {
            f(format!("wavelet.rec_{name}"), &mut self.rec[b]);
        }
        for (level, (refine, scales)) in self.refine.iter_mut().zip(&mut self.scales).enumerate() {
            for (b, name) in BAND_NAMES.iter().enumerate() {
                f(format!("wavelet.l{level}.refine_{name}"), &mut refine[b]);
                f(format!("wavelet.l{level}.scale_{name}"), &mut scales[b]);
            }
        }
        f("wavelet.conv_base".into(), &mut self.conv_base);
    }

    pub fn leaves(&self, g: &mut Graph<S>, trainable: bool) -> WaveletVars {
        let mut vars = Vec::new();
        self.visit(&mut |_, t| vars.push(g.leaf(t.clone(), trainable)));
        let mut it = vars.into_iter();
        WaveletVars::wire(&mut || it.next().unwrap(), self.levels())
    }
}

/// Graph-side handles of [`WaveletParams`].
pub struct WaveletVars {
    pub dec: [Var; 4],
    pub rec: [Var; 4],
    pub refine: Vec<[Var; 4]>,
    pub scales: Vec<[Var; 4]>,
    pub conv_base: Var,
}

impl WaveletVars {
    /// Rebuild from a var stream in [`WaveletParams::visit`] order: the four
    /// analysis kernels, the four synthesis kernels, then per level and band
    /// the interleaved (refine, scale) pair, and finally the base conv.
    pub fn wire(next: &mut impl FnMut() -> Var, levels: usize) -> Self {
        let dec = std::array::from_fn(|_| next());
        let rec = std::array::from_fn(|_| next());
        let mut refine = Vec::with_capacity(levels);
        let mut scales = Vec::with_capacity(levels);
        for _ in 0..levels {
            let mut r = [dec[0]; 4];
            let mut s = [dec[0]; 4];
            for b in 0..4 {
                r[b] = next();
                s[b] = next();
            }
            refine.push(r);
            scales.push(s);
        }
        Self { dec, rec, refine, scales, conv_base: next() }
    }
}

/// One analysis level's four subbands plus the padding it applied.
pub struct LevelBands {
    pub bands: [Var; 4],
    pub pad: PadRecord,
}

/// One analysis level: zero-pad odd spatial dims (bottom/right, recorded),
/// then four stride-2 depthwise convolutions.
pub fn dwt_level<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    dec: &[Var; 4],
) -> Result<LevelBands, TensorError> {
    let shape = g.shape(x);
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let pad = PadRecord { top: 0, bottom: h % 2, left: 0, right: w % 2 };
    let x = if pad.is_zero() { x } else { g.pad2d(x, pad)? };
    let mut bands = [x; 4];
    for (b, slot) in bands.iter_mut().enumerate() {
        *slot = g.depthwise_conv2d(x, dec[b], 2, Pad::default())?;
    }
    Ok(LevelBands { bands, pad })
}

/// One synthesis level: stride-2 transposed depthwise convolutions summed
/// over the four subbands, cropped back per the recorded padding.
pub fn iwt_level<S: Scalar>(
    g: &mut Graph<S>,
    bands: &[Var; 4],
    rec: &[Var; 4],
    pad: PadRecord,
) -> Result<Var, TensorError> {
    let expect = g.shape(bands[0]).to_vec();
    for &b in &bands[1..] {
        if g.shape(b) != expect {
            return Err(TensorError::dim(
                "iwt_level",
                format!("subband shapes disagree: {:?} vs {expect:?}", g.shape(b)),
            ));
        }
    }
    let mut sum = g.depthwise_conv2d_transposed(bands[0], rec[0], 2, Pad::default())?;
    for b in 1..4 {
        let part = g.depthwise_conv2d_transposed(bands[b], rec[b], 2, Pad::default())?;
        sum = g.add(sum, part)?;
    }
    if pad.is_zero() {
        Ok(sum)
    } else {
        g.crop2d(sum, pad)
    }
}

fn refine_band<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    kernel: Var,
    scale: Var,
) -> Result<Var, TensorError> {
    let conv = g.depthwise_conv2d(x, kernel, 1, Pad { h: 1, w: 1 })?;
    g.scale_channels(conv, scale)
}

/// The wavelet-reconstructed path (everything except the residual base
/// conv). The refined approximation feeds each next level; reconstruction
/// substitutes the deeper result into the low-frequency slot on the way
/// back up. `hf_dropout` may be 1.0, a test hook that keeps only the
/// low-frequency chain.
pub fn wavelet_path<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    vars: &WaveletVars,
    cfg: &WaveletConfig,
) -> Result<Var, TensorError> {
    let shape = g.shape(x);
    if shape.len() != 4 {
        return Err(TensorError::dim("wavelet_path", format!("expected B x D x H x W, got {shape:?}")));
    }
    let (levels, _) = effective_levels(cfg.levels.min(vars.refine.len()), shape[2], shape[3]);

    let mut approx = x;
    let mut stash: Vec<([Var; 3], PadRecord)> = Vec::with_capacity(levels);
    for level in 0..levels {
        let out = dwt_level(g, approx, &vars.dec)?;
        let mut refined = [out.bands[0]; 4];
        for band in 0..4 {
            let mut r =
                refine_band(g, out.bands[band], vars.refine[level][band], vars.scales[level][band])?;
            if band > 0 && cfg.hf_dropout > 0.0 {
                let site = site_id(&format!("wavelet.l{level}.{}", BAND_NAMES[band]));
                r = g.dropout_unchecked(r, cfg.hf_dropout, site)?;
            }
            refined[band] = r;
        }
        approx = refined[0];
        stash.push(([refined[1], refined[2], refined[3]], out.pad));
    }

    let mut recon = approx;
    for ([lh, hl, hh], pad) in stash.into_iter().rev() {
        recon = iwt_level(g, &[recon, lh, hl, hh], &vars.rec, pad)?;
    }
    Ok(recon)
}

/// Full module: residual depthwise base conv plus the wavelet path.
pub fn waveletconv_forward<S: Scalar>(
    g: &mut Graph<S>,
    x: Var,
    vars: &WaveletVars,
    cfg: &WaveletConfig,
) -> Result<Var, TensorError> {
    let path = wavelet_path(g, x, vars, cfg)?;
    let base = g.depthwise_conv2d(x, vars.conv_base, 1, Pad { h: 1, w: 1 })?;
    g.add(base, path)
}
