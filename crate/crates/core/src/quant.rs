//! Post-training INT8 quantization.
//!
//! Weights are symmetric per-tensor (`scale = max|w|/127`, zero point 0,
//! payload in [-127, 127], round-half-away-from-zero). Activations are
//! quantized dynamically per tensor at each quantized op boundary:
//! asymmetric over the batch min/max widened to include zero, so zero and
//! zero padding stay exactly representable. Accumulation is 32-bit integer;
//! every op requantizes back to f32 on the way out.

use crate::tensor::Tensor;

/// Scale floor for degenerate (all-zero) tensors.
pub const SCALE_EPS: f32 = 1e-12;

/// INT8 payload with per-tensor scale and zero point (0 for weights).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub data: Vec<i8>,
    pub scale: f32,
    pub zero_point: i32,
    pub shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[inline]
fn round_half_away(x: f32) -> f32 {
    x.round() // Rust's round() is half-away-from-zero
}

/// Symmetric per-tensor weight quantization.
pub fn quantize_symmetric(w: &Tensor<f32>) -> QuantizedTensor {
    let max_abs = w.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = (max_abs / 127.0).max(SCALE_EPS);
    let data = w
        .data()
        .iter()
        .map(|&v| round_half_away(v / scale).clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedTensor { data, scale, zero_point: 0, shape: w.shape().to_vec() }
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    let data = q
        .data
        .iter()
        .map(|&v| (v as i32 - q.zero_point) as f32 * q.scale)
        .collect();
    Tensor::new(q.shape.clone(), data).expect("quantized shape is consistent")
}

/// Dynamic asymmetric activation quantization over one tensor. The range is
/// widened to include zero; returns `(payload, scale, zero_point)` with
/// `x ~= (q - zero_point) * scale`.
pub fn quantize_dynamic(x: &[f32]) -> (Vec<i8>, f32, i32) {
    let (mut lo, mut hi) = (0.0f32, 0.0f32);
    for &v in x {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let scale = ((hi - lo) / 255.0).max(SCALE_EPS);
    let zp = (-128.0 - round_half_away(lo / scale)) as i32;
    let data = x
        .iter()
        .map(|&v| (round_half_away(v / scale) as i32 + zp).clamp(-128, 127) as i8)
        .collect();
    (data, scale, zp)
}

#[inline]
fn dot_i8(a: &[i8], b: &[i8]) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0i32;
    // Chunked so the autovectorizer sees independent accumulators.
    let mut it_a = a.chunks_exact(16);
    let mut it_b = b.chunks_exact(16);
    for (ca, cb) in (&mut it_a).zip(&mut it_b) {
        let mut part = 0i32;
        for i in 0..16 {
            part += ca[i] as i32 * cb[i] as i32;
        }
        acc += part;
    }
    for (x, y) in it_a.remainder().iter().zip(it_b.remainder()) {
        acc += *x as i32 * *y as i32;
    }
    acc
}

/// INT8 linear layer: weights pre-transposed to `(out, in)` rows with
/// per-output column sums for the activation zero-point correction.
#[derive(Clone, Debug)]
pub struct QuantLinear {
    pub weight_t: Vec<i8>,
    pub col_sums: Vec<i32>,
    pub scale: f32,
    pub bias: Vec<f32>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl QuantLinear {
    /// Quantize an `(in, out)` float weight plus bias.
    pub fn from_f32(weight: &Tensor<f32>, bias: &Tensor<f32>) -> Self {
        let (fan_in, fan_out) = (weight.shape()[0], weight.shape()[1]);
        let q = quantize_symmetric(weight);
        let mut weight_t = vec![0i8; fan_in * fan_out];
        for i in 0..fan_in {
            for o in 0..fan_out {
                weight_t[o * fan_in + i] = q.data[i * fan_out + o];
            }
        }
        let col_sums = (0..fan_out)
            .map(|o| weight_t[o * fan_in..(o + 1) * fan_in].iter().map(|&v| v as i32).sum())
            .collect();
        Self { weight_t, col_sums, scale: q.scale, bias: bias.data().to_vec(), fan_in, fan_out }
    }

    /// `y (rows x out) = dequant(q(x) * W^T) + bias` with i32 accumulation.
    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), rows * self.fan_in);
        let (qx, sx, zp) = quantize_dynamic(x);
        let combined = sx * self.scale;
        let mut out = vec![0.0f32; rows * self.fan_out];
        for r in 0..rows {
            let xa = &qx[r * self.fan_in..(r + 1) * self.fan_in];
            let dst = &mut out[r * self.fan_out..(r + 1) * self.fan_out];
            for (o, slot) in dst.iter_mut().enumerate() {
                let acc = dot_i8(xa, &self.weight_t[o * self.fan_in..(o + 1) * self.fan_in]);
                *slot = (acc - zp * self.col_sums[o]) as f32 * combined + self.bias[o];
            }
        }
        out
    }
}

/// INT8 depthwise conv kernel.
#[derive(Clone, Debug)]
pub struct QuantConv {
    pub kernel: Vec<i8>,
    pub scale: f32,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl QuantConv {
    pub fn from_f32(kernel: &Tensor<f32>) -> Self {
        let (channels, kh, kw) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        let q = quantize_symmetric(kernel);
        Self { kernel: q.data, scale: q.scale, channels, kh, kw }
    }

    /// Depthwise conv with i32 accumulation; the zero-point correction only
    /// covers taps inside the input, so zero padding contributes exactly 0.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x: &[f32],
        b: usize,
        h: usize,
        w: usize,
        stride: usize,
        pad: (usize, usize),
        oh: usize,
        ow: usize,
    ) -> Vec<f32> {
        let c = self.channels;
        debug_assert_eq!(x.len(), b * c * h * w);
        let (qx, sx, zp) = quantize_dynamic(x);
        let combined = sx * self.scale;
        let mut out = vec![0.0f32; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                let xc = &qx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let kc = &self.kernel[ci * self.kh * self.kw..(ci + 1) * self.kh * self.kw];
                let yc = &mut out[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0i32;
                        let mut in_taps = 0i32;
                        for i in 0..self.kh {
                            let iy = (oy * stride + i) as isize - pad.0 as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for j in 0..self.kw {
                                let ix = (ox * stride + j) as isize - pad.1 as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let kv = kc[i * self.kw + j] as i32;
                                acc += xc[iy as usize * w + ix as usize] as i32 * kv;
                                in_taps += kv;
                            }
                        }
                        yc[oy * ow + ox] = (acc - zp * in_taps) as f32 * combined;
                    }
                }
            }
        }
        out
    }
}

/// Transposed (adjoint) INT8 depthwise conv for the wavelet synthesis path.
#[allow(clippy::too_many_arguments)]
pub fn quant_conv_transposed(
    qc: &QuantConv,
    x: &[f32],
    b: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let c = qc.channels;
    let (qx, sx, zp) = quantize_dynamic(x);
    let combined = sx * qc.scale;
    let mut acc = vec![0i32; b * c * h * w];
    let mut taps = vec![0i32; b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let xc = &qx[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
            let kc = &qc.kernel[ci * qc.kh * qc.kw..(ci + 1) * qc.kh * qc.kw];
            let base = (bi * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = xc[oy * ow + ox] as i32;
                    for i in 0..qc.kh {
                        let iy = oy * stride + i;
                        if iy >= h {
                            continue;
                        }
                        for j in 0..qc.kw {
                            let ix = ox * stride + j;
                            if ix >= w {
                                continue;
                            }
                            let kv = kc[i * qc.kw + j] as i32;
                            acc[base + iy * w + ix] += v * kv;
                            taps[base + iy * w + ix] += kv;
                        }
                    }
                }
            }
        }
    }
    acc.iter()
        .zip(&taps)
        .map(|(&a, &t)| (a - zp * t) as f32 * combined)
        .collect()
}
