//! Central-difference gradient verification.
//!
//! The oracle only ever calls the forward evaluation of whatever it checks,
//! so it is independent of the backward pass. Checks run in `f64`; the
//! required tolerances are unattainable in single precision.

use crate::tensor::Tensor;

/// Step size used throughout the gradient suite.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error tolerance for analytic vs numeric gradients.
pub const DEFAULT_TOL: f64 = 1e-4;

/// Central differences of `f` with respect to every element of every input.
pub fn central_difference<F>(mut f: F, inputs: &[Tensor<f64>], h: f64) -> Vec<Tensor<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for pi in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[pi].shape());
        for ei in 0..inputs[pi].numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[ei] += h;
            let fp = f(&plus);
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[ei] -= h;
            let fm = f(&minus);
            grad.data_mut()[ei] = (fp - fm) / (2.0 * h);
        }
        grads.push(grad);
    }
    grads
}

/// Worst relative error between two gradients. Pairs that are both below
/// 1e-8 in magnitude count as exact agreement.
pub fn max_rel_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        if a.abs() < 1e-8 && n.abs() < 1e-8 {
            continue;
        }
        let rel = (a - n).abs() / a.abs().max(n.abs());
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_derivative() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let g = central_difference(|v| v[0].data()[0] * v[0].data()[0], &[x], DEFAULT_STEP);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn rel_error_ignores_double_zeros() {
        let a = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1e-12, 1.0 + 1e-6]).unwrap();
        assert!(max_rel_error(&a, &b) < 1e-5);
    }
}
