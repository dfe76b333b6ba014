//! Central finite differences used as an independent oracle for the hand
//! written backward passes. Meant for `f64` tensors.

use crate::tensor::Tensor;

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for a single coordinate.
pub fn central_difference_at(
    x: &Tensor<f64>,
    index: usize,
    eps: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> f64 {
    let mut probe = x.clone();
    probe.data_mut()[index] = x.data()[index] + eps;
    let plus = f(&probe);
    probe.data_mut()[index] = x.data()[index] - eps;
    let minus = f(&probe);
    (plus - minus) / (2.0 * eps)
}

/// Numerical gradient of `f` at `x`, every coordinate.
pub fn central_difference(
    x: &Tensor<f64>,
    eps: f64,
    mut f: impl FnMut(&Tensor<f64>) -> f64,
) -> Tensor<f64> {
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        grad.data_mut()[i] = central_difference_at(x, i, eps, &mut f);
    }
    grad
}

/// Worst elementwise [`relative_error`] between two gradients of equal shape.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Checks the analytic gradients of a scalar function of several tensors.
///
/// `f` evaluates the loss for a full argument list; `analytic[i]` is the
/// claimed gradient with respect to `inputs[i]`. Returns the worst relative
/// error over every coordinate of every input.
pub fn finite_diff_check(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    eps: f64,
    f: impl Fn(&[Tensor<f64>]) -> f64,
) -> f64 {
    assert_eq!(inputs.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for (slot, (x, g)) in inputs.iter().zip(analytic).enumerate() {
        let numeric = central_difference(x, eps, |probe| {
            let mut args = inputs.to_vec();
            args[slot] = probe.clone();
            f(&args)
        });
        worst = worst.max(max_relative_error(g, &numeric));
    }
    worst
}

/// Derivative of `f` at `0` from central differences refined by Richardson
/// extrapolation, shrinking the step until two successive extrapolations
/// agree to `1e-5` relative. `None` when they never do, which happens at a
/// kink (ReLU, max-pool switch) inside the probe interval.
pub fn richardson_derivative(mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let mut h = 1e-4;
    let mut last_central: Option<f64> = None;
    let mut last_extrapolated: Option<f64> = None;
    for _ in 0..7 {
        let central = (f(h) - f(-h)) / (2.0 * h);
        if let Some(prev) = last_central {
            let r = (4.0 * central - prev) / 3.0;
            if let Some(pr) = last_extrapolated {
                if (r - pr).abs() <= 1e-5 * r.abs() + 1e-9 {
                    return Some(r);
                }
            }
            last_extrapolated = Some(r);
        }
        last_central = Some(central);
        h /= 4.0;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::linear::{linear, linear_backward};

    #[test]
    fn linear_map_is_exact() {
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.11).cos());
        let b = Tensor::from_fn(&[2], |i| i as f64);
        let up = Tensor::from_fn(&[3, 2], |i| 1.0 + i as f64);
        let (gx, gw, gb) = linear_backward(&up, &x, &w).unwrap();
        let err = finite_diff_check(&[x, w, b], &[gx, gw, gb], 1e-5, |args| {
            let y = linear(&args[0], &args[1], &args[2]).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        });
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn richardson_smooth_and_unresolvable() {
        let d = richardson_derivative(|t| (1.0 + t).exp()).unwrap();
        assert!((d - 1f64.exp()).abs() < 1e-8);
        assert!(richardson_derivative(|t| t + 1e-3 * (1e9 * t).sin()).is_none());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
