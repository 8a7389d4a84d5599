//! Central finite-difference gradient checking.
//!
//! The checks rebuild the forward graph from scratch on every probe, so they
//! stay independent of the analytic backward path they verify.

use crate::tensor::Tensor;

/// Central finite-difference gradient of `loss` with respect to `param`.
///
/// `loss` must rebuild its graph from the current leaf values on every call.
pub fn numeric_grad<F: Fn() -> f64>(param: &Tensor, h: f64, loss: &F) -> Vec<f64> {
    let n = param.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + h;
        let plus = loss();
        param.data_mut()[i] = orig - h;
        let minus = loss();
        param.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Central finite-difference gradient at a subset of coordinates, for
/// whole-model checks where probing every entry of every weight matrix would
/// dominate the runtime.
pub fn numeric_grad_at<F: Fn() -> f64>(
    param: &Tensor,
    coords: &[usize],
    h: f64,
    loss: &F,
) -> Vec<f64> {
    let mut grad = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + h;
        let plus = loss();
        param.data_mut()[i] = orig - h;
        let minus = loss();
        param.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Up to `max` evenly spaced coordinates of a length-`n` tensor (all of them
/// when `n <= max`). Deterministic.
pub fn stride_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

/// Maximum elementwise relative error between an analytic and a numeric
/// gradient. The denominator is floored so that near-zero pairs compare on an
/// absolute scale.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
