//! Vector kernels shared by the tape and the standalone API.

use super::tensor::Real;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Numerically stable softmax (max-subtracted).
pub fn softmax<F: Real>(x: &[F]) -> Vec<F> {
    let mut out = x.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place<F: Real>(x: &mut [F]) {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v = *v / total;
    }
}

pub fn log_sum_exp<F: Real>(x: &[F]) -> F {
    let max = x.iter().copied().fold(F::neg_infinity(), F::max);
    if max == F::neg_infinity() {
        return max;
    }
    max + x.iter().map(|&v| (v - max).exp()).sum::<F>().ln()
}

/// `-log softmax(logits)[gold]` and its gradient `softmax(logits) - onehot(gold)`.
pub fn cross_entropy<F: Real>(logits: &[F], gold: usize) -> Result<(F, Vec<F>)> {
    if gold >= logits.len() {
        return Err(Error::IdOutOfRange {
            what: "gold class",
            id: gold,
            size: logits.len(),
        });
    }
    let mut grad = softmax(logits);
    let loss = log_sum_exp(logits) - logits[gold];
    grad[gold] -= F::one();
    Ok((loss, grad))
}

/// Per-vector normalization to zero mean and unit variance followed by the
/// affine map `gain * x̂ + bias`. Returns the output together with `x̂` and
/// `1/σ` for the backward pass.
pub fn layer_norm_with_cache<F: Real>(x: &[F], gain: &[F], bias: &[F]) -> (Vec<F>, Vec<F>, F) {
    let n = F::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv_std = F::one() / (var + F::lit(LAYER_NORM_EPS)).sqrt();
    let xhat: Vec<F> = x.iter().map(|&v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(&h, (&g, &b))| g * h + b)
        .collect();
    (y, xhat, inv_std)
}

pub fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F]) -> Result<Vec<F>> {
    if x.len() < 2 {
        return Err(Error::Shape("layer_norm needs at least two features".into()));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape("layer_norm gain/bias length".into()));
    }
    Ok(layer_norm_with_cache(x, gain, bias).0)
}

/// Input gradient of layer norm given the cached `x̂`, `1/σ` and the gradient
/// w.r.t. `x̂` (already multiplied by the gain).
pub fn layer_norm_backward<F: Real>(dxhat: &[F], xhat: &[F], inv_std: F, dx: &mut [F]) {
    let n = F::from_usize(xhat.len()).unwrap();
    let mean_d = dxhat.iter().copied().sum::<F>() / n;
    let mean_dx = dxhat.iter().zip(xhat).map(|(&d, &h)| d * h).sum::<F>() / n;
    for ((o, &d), &h) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *o += inv_std * (d - mean_d - h * mean_dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform() {
        for p in softmax(&[0.0f64, 0.0, 0.0]) {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax(&[1000.0f32, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn softmax_of_log_weights() {
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (got, want) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_values() {
        let (l, _) = cross_entropy(&[0.3f64; 5], 2).unwrap();
        assert_abs_diff_eq!(l, 5f64.ln(), epsilon = 1e-12);
        let (l, _) = cross_entropy(&[10.0f64, -10.0], 0).unwrap();
        assert!(l < 1e-8);
        assert!(cross_entropy(&[0.0f64; 2], 2).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_central_differences() {
        let logits = [0.2f64, -1.3, 0.7, 2.1];
        let (_, grad) = cross_entropy(&logits, 1).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut up = logits;
            let mut down = logits;
            up[i] += h;
            down[i] -= h;
            let num = (cross_entropy(&up, 1).unwrap().0 - cross_entropy(&down, 1).unwrap().0) / (2.0 * h);
            let rel = (grad[i] - num).abs() / num.abs().max(1e-8);
            assert!(rel < 1e-4, "coord {i}: {} vs {num}", grad[i]);
        }
    }

    #[test]
    fn layer_norm_constant_input_yields_bias() {
        let y = layer_norm(&[3.0f64; 4], &[2.0; 4], &[0.5, -1.0, 0.0, 7.0]).unwrap();
        assert_eq!(y, vec![0.5, -1.0, 0.0, 7.0]);
        assert!(layer_norm(&[1.0f64], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = [1.0f64, 4.0, -2.0, 0.5, 9.0];
        let y = layer_norm(&x, &[1.0; 5], &[0.0; 5]).unwrap();
        let mean = y.iter().sum::<f64>() / 5.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn layer_norm_gradient_matches_central_differences() {
        let x = [0.3f64, -1.1, 2.0, 0.4];
        let g = [1.5, 0.7, -0.2, 1.0];
        let b = [0.1, 0.2, 0.3, 0.4];
        let w = [0.9, -0.4, 1.3, 0.25];
        let f = |x: &[f64]| -> f64 {
            layer_norm(x, &g, &b).unwrap().iter().zip(&w).map(|(y, w)| y * w).sum()
        };
        let (_, xhat, inv_std) = layer_norm_with_cache(&x, &g, &b);
        let dxhat: Vec<f64> = w.iter().zip(&g).map(|(w, g)| w * g).collect();
        let mut dx = vec![0.0; 4];
        layer_norm_backward(&dxhat, &xhat, inv_std, &mut dx);
        let h = 1e-5;
        for i in 0..4 {
            let (mut up, mut down) = (x, x);
            up[i] += h;
            down[i] -= h;
            let num = (f(&up) - f(&down)) / (2.0 * h);
            assert!((dx[i] - num).abs() / num.abs().max(1e-8) < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(x in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let (a, b) = (softmax(&x), softmax(&shifted));
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() < 1e-6);
                prop_assert!(*p > 0.0);
            }
        }
    }
}
