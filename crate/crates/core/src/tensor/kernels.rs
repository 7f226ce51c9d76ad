//! Raw slice-level kernels shared by the autodiff graph and the graph-free
//! inference engine. All layouts are row-major; shapes are the caller's
//! responsibility (debug-asserted here).

use super::Scalar;

/// Symmetric zero padding for one spatial axis pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Pad {
    pub h: usize,
    pub w: usize,
}

/// Per-side zero padding, recorded so reconstructions can crop back.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PadRecord {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PadRecord {
    pub fn is_zero(&self) -> bool {
        self.top == 0 && self.bottom == 0 && self.left == 0 && self.right == 0
    }
}

/// Output spatial extent of a strided valid convolution over a padded axis.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `y[b,c,oh,ow] = sum_{i,j} x[b,c,oh*s-ph+i,ow*s-pw+j] * k[c,i,j]`
/// (cross-correlation; out-of-range reads are zero).
#[allow(clippy::too_many_arguments)]
pub fn dw_conv2d<S: Scalar>(
    x: &[S],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kernel: &[S],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
    y: &mut [S],
) {
    let oh = conv_out_dim(h, kh, stride, pad.h).expect("kernel larger than padded input");
    let ow = conv_out_dim(w, kw, stride, pad.w).expect("kernel larger than padded input");
    debug_assert_eq!(x.len(), b * c * h * w);
    debug_assert_eq!(kernel.len(), c * kh * kw);
    debug_assert_eq!(y.len(), b * c * oh * ow);

    for bi in 0..b {
        for ci in 0..c {
            let xc = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let kc = &kernel[ci * kh * kw..(ci + 1) * kh * kw];
            let yc = &mut y[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::ZERO;
                    for i in 0..kh {
                        let iy = (oy * stride + i) as isize - pad.h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * stride + j) as isize - pad.w as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc = acc.add(xc[iy as usize * w + ix as usize].mul(kc[i * kw + j]));
                        }
                    }
                    yc[oy * ow + ox] = acc;
                }
            }
        }
    }
}

/// Adjoint of [`dw_conv2d`] with the same `(kernel, stride, pad)`: scatters
/// `x` (living on the conv *output* grid of `oh x ow`) back onto an
/// `h x w` grid, so that `<conv(u), x> == <u, dw_conv2d_transposed(x)>`.
/// Also the input-gradient of the forward conv. Accumulates into `y`.
#[allow(clippy::too_many_arguments)]
pub fn dw_conv2d_transposed_acc<S: Scalar>(
    x: &[S],
    b: usize,
    c: usize,
    oh: usize,
    ow: usize,
    kernel: &[S],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
    h: usize,
    w: usize,
    y: &mut [S],
) {
    debug_assert_eq!(x.len(), b * c * oh * ow);
    debug_assert_eq!(kernel.len(), c * kh * kw);
    debug_assert_eq!(y.len(), b * c * h * w);

    for bi in 0..b {
        for ci in 0..c {
            let xc = &x[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
            let kc = &kernel[ci * kh * kw..(ci + 1) * kh * kw];
            let yc = &mut y[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = xc[oy * ow + ox];
                    for i in 0..kh {
                        let iy = (oy * stride + i) as isize - pad.h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * stride + j) as isize - pad.w as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let slot = &mut yc[iy as usize * w + ix as usize];
                            *slot = slot.add(v.mul(kc[i * kw + j]));
                        }
                    }
                }
            }
        }
    }
}

/// Kernel gradient of [`dw_conv2d`]: `dk[c,i,j] += sum_{b,oy,ox} dy * x`.
#[allow(clippy::too_many_arguments)]
pub fn dw_conv2d_kernel_grad_acc<S: Scalar>(
    x: &[S],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    dy: &[S],
    oh: usize,
    ow: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: Pad,
    dk: &mut [S],
) {
    debug_assert_eq!(dk.len(), c * kh * kw);
    for bi in 0..b {
        for ci in 0..c {
            let xc = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            let dyc = &dy[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
            let dkc = &mut dk[ci * kh * kw..(ci + 1) * kh * kw];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dyc[oy * ow + ox];
                    for i in 0..kh {
                        let iy = (oy * stride + i) as isize - pad.h as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for j in 0..kw {
                            let ix = (ox * stride + j) as isize - pad.w as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let slot = &mut dkc[i * kw + j];
                            *slot = slot.add(g.mul(xc[iy as usize * w + ix as usize]));
                        }
                    }
                }
            }
        }
    }
}

/// Zero-pad the two trailing spatial axes per side.
pub fn pad2d<S: Scalar>(x: &[S], maps: usize, h: usize, w: usize, r: PadRecord) -> Vec<S> {
    let nh = h + r.top + r.bottom;
    let nw = w + r.left + r.right;
    let mut out = vec![S::ZERO; maps * nh * nw];
    for m in 0..maps {
        for row in 0..h {
            let src = &x[(m * h + row) * w..(m * h + row) * w + w];
            let dst_off = (m * nh + row + r.top) * nw + r.left;
            out[dst_off..dst_off + w].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`pad2d`]: drop the padded border.
pub fn crop2d<S: Scalar>(x: &[S], maps: usize, h: usize, w: usize, r: PadRecord) -> Vec<S> {
    let ih = h - r.top - r.bottom;
    let iw = w - r.left - r.right;
    let mut out = vec![S::ZERO; maps * ih * iw];
    for m in 0..maps {
        for row in 0..ih {
            let src_off = (m * h + row + r.top) * w + r.left;
            out[(m * ih + row) * iw..(m * ih + row + 1) * iw]
                .copy_from_slice(&x[src_off..src_off + iw]);
        }
    }
    out
}

/// LayerNorm over rows of width `n`, then affine. Returns `(mean, rstd)` per
/// row for the backward pass.
pub fn layer_norm_rows<S: Scalar>(
    x: &[S],
    n: usize,
    gamma: &[S],
    beta: &[S],
    eps: f64,
    y: &mut [S],
) -> (Vec<S>, Vec<S>) {
    debug_assert_eq!(x.len() % n, 0);
    let rows = x.len() / n;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_n = S::from_f64(1.0 / n as f64);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mut mean = S::ZERO;
        for &v in xr {
            mean = mean.add(v);
        }
        mean = mean.mul(inv_n);
        let mut var = S::ZERO;
        for &v in xr {
            let d = v.sub(mean);
            var = var.add(d.mul(d));
        }
        var = var.mul(inv_n);
        let rstd = S::ONE.div(var.add(S::from_f64(eps)).sqrt());
        for i in 0..n {
            let xhat = xr[i].sub(mean).mul(rstd);
            y[r * n + i] = xhat.mul(gamma[i]).add(beta[i]);
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Backward of [`layer_norm_rows`]. Accumulates into the three gradients.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_rows_backward<S: Scalar>(
    x: &[S],
    n: usize,
    gamma: &[S],
    means: &[S],
    rstds: &[S],
    dy: &[S],
    dx: &mut [S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) {
    let rows = x.len() / n;
    let inv_n = S::from_f64(1.0 / n as f64);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let dyr = &dy[r * n..(r + 1) * n];
        let mean = means[r];
        let rstd = rstds[r];
        let mut sum_g = S::ZERO; // sum(dy * gamma)
        let mut sum_gx = S::ZERO; // sum(dy * gamma * xhat)
        for i in 0..n {
            let xhat = xr[i].sub(mean).mul(rstd);
            let g = dyr[i].mul(gamma[i]);
            sum_g = sum_g.add(g);
            sum_gx = sum_gx.add(g.mul(xhat));
            dgamma[i] = dgamma[i].add(dyr[i].mul(xhat));
            dbeta[i] = dbeta[i].add(dyr[i]);
        }
        let mean_g = sum_g.mul(inv_n);
        let mean_gx = sum_gx.mul(inv_n);
        for i in 0..n {
            let xhat = xr[i].sub(mean).mul(rstd);
            let g = dyr[i].mul(gamma[i]);
            let d = g.sub(mean_g).sub(xhat.mul(mean_gx)).mul(rstd);
            dx[r * n + i] = dx[r * n + i].add(d);
        }
    }
}

/// Numerically stable softmax over rows of width `n`.
pub fn softmax_rows<S: Scalar>(x: &[S], n: usize, y: &mut [S]) {
    let rows = x.len() / n;
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mut maxv = xr[0];
        for &v in &xr[1..] {
            maxv = maxv.maximum(v);
        }
        let mut sum = S::ZERO;
        for i in 0..n {
            let e = xr[i].sub(maxv).exp();
            y[r * n + i] = e;
            sum = sum.add(e);
        }
        let inv = S::ONE.div(sum);
        for i in 0..n {
            y[r * n + i] = y[r * n + i].mul(inv);
        }
    }
}

/// Backward of softmax given its output `y`: `dx = y * (dy - sum(dy * y))`.
pub fn softmax_rows_backward<S: Scalar>(y: &[S], n: usize, dy: &[S], dx: &mut [S]) {
    let rows = y.len() / n;
    for r in 0..rows {
        let yr = &y[r * n..(r + 1) * n];
        let dyr = &dy[r * n..(r + 1) * n];
        let mut dot = S::ZERO;
        for i in 0..n {
            dot = dot.add(yr[i].mul(dyr[i]));
        }
        for i in 0..n {
            dx[r * n + i] = dx[r * n + i].add(yr[i].mul(dyr[i].sub(dot)));
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7; // 1 / sqrt(2*pi)

/// Exact-erf GELU: `0.5 * x * (1 + erf(x / sqrt(2)))`.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    half.mul(x).mul(S::ONE.add(x.mul(S::from_f64(FRAC_1_SQRT_2)).erf()))
}

/// d/dx of [`gelu`]: `Phi(x) + x * phi(x)`.
pub fn gelu_derivative<S: Scalar>(x: S) -> S {
    let xf = x.to_f64();
    let phi_cdf = 0.5 * (1.0 + libm::erf(xf * FRAC_1_SQRT_2));
    let phi_pdf = (-0.5 * xf * xf).exp() * INV_SQRT_TAU;
    S::from_f64(phi_cdf + xf * phi_pdf)
}

/// Rotation angles for one token: pair `i` turns by `pos * base^(-2i/dim)`.
pub fn rope_angles(dim: usize, base: f64, pos: f64) -> Vec<f64> {
    (0..dim / 2).map(|i| pos * base.powf(-2.0 * i as f64 / dim as f64)).collect()
}

/// In-place rotary embedding over `maps` stacked `(s x dh)` blocks; the
/// block row index is the token position.
pub fn rope_inplace<S: Scalar>(
    data: &mut [S],
    maps: usize,
    s: usize,
    dh: usize,
    base: f64,
    invert: bool,
) {
    // Angle table is shared by every map.
    let tables: Vec<Vec<f64>> = (0..s).map(|pos| rope_angles(dh, base, pos as f64)).collect();
    for m in 0..maps {
        for (pos, angles) in tables.iter().enumerate() {
            let off = (m * s + pos) * dh;
            rotate_pairs(&mut data[off..off + dh], angles, invert);
        }
    }
}

/// Rotate consecutive dimension pairs of `v` (length `dim`) in place by the
/// given angles; `invert` applies the opposite rotation.
pub fn rotate_pairs<S: Scalar>(v: &mut [S], angles: &[f64], invert: bool) {
    debug_assert_eq!(v.len(), angles.len() * 2);
    for (i, &angle) in angles.iter().enumerate() {
        let a = if invert { -angle } else { angle };
        let (sin, cos) = a.sin_cos();
        let (sin, cos) = (S::from_f64(sin), S::from_f64(cos));
        let x = v[2 * i];
        let y = v[2 * i + 1];
        v[2 * i] = x.mul(cos).sub(y.mul(sin));
        v[2 * i + 1] = x.mul(sin).add(y.mul(cos));
    }
}
