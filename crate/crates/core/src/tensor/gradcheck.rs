//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of the tape's backward rules: it only ever calls
//! the forward path at perturbed inputs. Keep it that way — it is the
//! reference the backward implementation is judged against.

use super::{Graph, GraphCtx, Tensor, TensorError, Var};

/// Step used by the gradient suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite differences of a scalar function of several tensors.
pub fn numerical_grads<F>(inputs: &[Tensor<f64>], mut f: F, step: f64) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for ti in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[ti].shape().to_vec());
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = f(&work);
            work[ti].data_mut()[ei] = orig - step;
            let minus = f(&work);
            work[ti].data_mut()[ei] = orig;
            g.data_mut()[ei] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    grads
}

/// Build a scalar loss over graph leaves, backprop it, and compare every
/// input gradient against central differences. Returns the worst relative
/// error, or the description of the first failure.
pub fn check_gradients<F>(
    ctx: GraphCtx,
    inputs: &[Tensor<f64>],
    build: F,
    step: f64,
    rel_tol: f64,
) -> Result<f64, String>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new(ctx);
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &vars).expect("forward failed during finite differences");
        g.value(loss).item()
    };
    let numeric = numerical_grads(inputs, eval, step);

    let mut g = Graph::new(ctx);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars).map_err(|e| e.to_string())?;
    g.backward(loss).map_err(|e| e.to_string())?;

    let mut worst = 0.0f64;
    for (ti, var) in vars.iter().enumerate() {
        let analytic = g
            .grad(*var)
            .unwrap_or_else(|| Tensor::zeros(inputs[ti].shape().to_vec()));
        for (ei, (&a, &n)) in analytic.data().iter().zip(numeric[ti].data()).enumerate() {
            let err = relative_error(a, n, 1e-6);
            if err > worst {
                worst = err;
            }
            if err > rel_tol {
                return Err(format!(
                    "input {ti} element {ei}: analytic {a:.9e} vs numeric {n:.9e} (rel err {err:.3e})"
                ));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::kernels::Pad;

    fn randn(shape: Vec<usize>, rng: &mut SplitMix64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.next_normal())
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(1);
        let a = randn(vec![3, 4], &mut rng);
        let b = randn(vec![4, 2], &mut rng);
        let worst = check_gradients(
            GraphCtx::eval(),
            &[a, b],
            |g, vars| {
                let y = g.matmul(vars[0], vars[1])?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
            1e-6,
        )
        .unwrap();
        assert!(worst <= 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn bmm_gradients_both_orientations() {
        let mut rng = SplitMix64::new(2);
        for &transpose_b in &[false, true] {
            let a = randn(vec![2, 3, 4], &mut rng);
            let b = if transpose_b { randn(vec![2, 5, 4], &mut rng) } else { randn(vec![2, 4, 5], &mut rng) };
            check_gradients(
                GraphCtx::eval(),
                &[a, b],
                |g, vars| {
                    let y = g.bmm(vars[0], vars[1], transpose_b)?;
                    let sq = g.mul(y, y)?;
                    g.sum(sq)
                },
                DEFAULT_STEP,
                1e-4,
            )
            .unwrap();
        }
    }

    #[test]
    fn conv_and_transposed_conv_gradients() {
        let mut rng = SplitMix64::new(3);
        let x = randn(vec![2, 2, 5, 6], &mut rng);
        let k = randn(vec![2, 3, 3], &mut rng);
        check_gradients(
            GraphCtx::eval(),
            &[x, k],
            |g, vars| {
                let y = g.depthwise_conv2d(vars[0], vars[1], 2, Pad { h: 1, w: 1 })?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();

        let mut rng = SplitMix64::new(4);
        let x = randn(vec![1, 2, 3, 3], &mut rng);
        let k = randn(vec![2, 2, 2], &mut rng);
        check_gradients(
            GraphCtx::eval(),
            &[x, k],
            |g, vars| {
                let y = g.depthwise_conv2d_transposed(vars[0], vars[1], 2, Pad::default())?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn pointwise_and_norm_gradients() {
        let mut rng = SplitMix64::new(5);
        let x = randn(vec![3, 6], &mut rng);
        let gamma = randn(vec![6], &mut rng);
        let beta = randn(vec![6], &mut rng);
        check_gradients(
            GraphCtx::eval(),
            &[x, gamma, beta],
            |g, vars| {
                let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                let y = g.gelu(y)?;
                let y = g.softmax(y, 1)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn sequence_and_rope_gradients() {
        let mut rng = SplitMix64::new(6);
        let x = randn(vec![2, 3, 4], &mut rng);
        let token = randn(vec![4], &mut rng);
        check_gradients(
            GraphCtx::eval(),
            &[x, token],
            |g, vars| {
                let z = g.prepend_token(vars[0], vars[1])?;
                let z = g.reshape(z, vec![2, 1, 4, 4])?;
                let z = g.rope_rotate(z, 100.0)?;
                let z = g.reshape(z, vec![2, 4, 4])?;
                let t0 = g.select_token(z, 2)?;
                let sq = g.mul(t0, t0)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn cross_entropy_and_scaling_gradients() {
        let mut rng = SplitMix64::new(7);
        let logits = randn(vec![3, 5], &mut rng);
        let scales = randn(vec![5], &mut rng);
        let rows = randn(vec![3], &mut rng);
        check_gradients(
            GraphCtx::eval(),
            &[logits, scales, rows],
            |g, vars| {
                let x = g.reshape(vars[0], vec![3, 5, 1, 1])?;
                let x = g.scale_channels(x, vars[1])?;
                let x = g.scale_rows(x, vars[2])?;
                let x = g.reshape(x, vec![3, 5])?;
                g.cross_entropy_mean(x, &[0, 4, 2])
            },
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn dropout_gradient_with_frozen_mask() {
        // The mask depends only on (seed, site, step), so finite differences
        // see a fixed linear map and the check is exact.
        let mut rng = SplitMix64::new(8);
        let x = randn(vec![40], &mut rng);
        check_gradients(
            GraphCtx::train(11, 3),
            &[x],
            |g, vars| {
                let y = g.dropout(vars[0], 0.5, 99)?;
                let sq = g.mul(y, y)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
    }

    #[test]
    fn pad_crop_add_bias_gradients() {
        let mut rng = SplitMix64::new(9);
        let x = randn(vec![1, 2, 3, 5], &mut rng);
        let bias = randn(vec![5], &mut rng);
        check_gradients(
            GraphCtx::eval(),
            &[x, bias],
            |g, vars| {
                let y = g.add_bias(vars[0], vars[1])?;
                let p = g.pad2d(y, crate::tensor::kernels::PadRecord { top: 0, bottom: 1, left: 0, right: 1 })?;
                let c = g.crop2d(p, crate::tensor::kernels::PadRecord { top: 1, bottom: 0, left: 2, right: 0 })?;
                let sq = g.mul(c, c)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
            1e-4,
        )
        .unwrap();
    }
}
