//! Per-channel batch normalization over `N x C x H x W`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean and (unbiased) variance tracked in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }
}

/// What the backward pass needs from a train-mode forward.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

fn check<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.dims4()?;
    gamma.expect_shape(&[c])?;
    beta.expect_shape(&[c])?;
    Ok((n, c, h * w))
}

/// Train mode: normalize with batch statistics, update `running` with
/// momentum [`BN_MOMENTUM`].
pub fn batchnorm2d_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, hw) = check(input, gamma, beta)?;
    let count = n * hw;
    if count < 2 {
        return Err(Error::DegenerateVariance(count));
    }
    let x = input.data();
    let mut normalized = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = (0..n).map(|b| &x[(b * c + ch) * hw..][..hw]);
        let mut sum = 0.0f64;
        for p in planes.clone() {
            sum += p.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count as f64;
        let mut sq = 0.0f64;
        for p in planes {
            sq += p.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>();
        }
        let var = sq / count as f64;
        let istd = 1.0 / (var + eps).sqrt();
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        let (mean_t, istd_t) = (T::of(mean), T::of(istd));
        for b in 0..n {
            let off = (b * c + ch) * hw;
            let src = &x[off..off + hw];
            let xh = &mut normalized.data_mut()[off..off + hw];
            for (d, &s) in xh.iter_mut().zip(src) {
                *d = (s - mean_t) * istd_t;
            }
            let xh = &normalized.data()[off..off + hw];
            for (d, &v) in out.data_mut()[off..off + hw].iter_mut().zip(xh) {
                *d = g * v + bt;
            }
        }
        inv_std.push(istd_t);
        let m = BN_MOMENTUM;
        let unbiased = sq / (count - 1) as f64;
        let rm = &mut running.mean.data_mut()[ch];
        *rm = T::of((1.0 - m) * rm.as_f64() + m * mean);
        let rv = &mut running.var.data_mut()[ch];
        *rv = T::of((1.0 - m) * rv.as_f64() + m * unbiased);
    }
    Ok((out, BnCache { normalized, inv_std }))
}

/// Eval mode: normalize with the running statistics.
pub fn batchnorm2d_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, hw) = check(input, gamma, beta)?;
    let mut out = input.clone();
    for ch in 0..c {
        let istd = T::of(1.0 / (running.var.data()[ch].as_f64() + eps).sqrt());
        let scale = gamma.data()[ch] * istd;
        let shift = beta.data()[ch] - running.mean.data()[ch] * scale;
        for b in 0..n {
            for v in &mut out.data_mut()[(b * c + ch) * hw..][..hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    upstream.expect_shape(cache.normalized.shape())?;
    let (n, c, h, w) = upstream.dims4()?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let dy = upstream.data();
    let xh = cache.normalized.data();
    let mut grad_input = Tensor::zeros(upstream.shape());
    let mut grad_gamma = Tensor::zeros(&[c]);
    let mut grad_beta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xh = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * hw;
            for (&d, &x) in dy[off..off + hw].iter().zip(&xh[off..off + hw]) {
                sum_dy += d.as_f64();
                sum_dy_xh += (d * x).as_f64();
            }
        }
        grad_gamma.data_mut()[ch] = T::of(sum_dy_xh);
        grad_beta.data_mut()[ch] = T::of(sum_dy);
        let scale = T::of(gamma.data()[ch].as_f64() * cache.inv_std[ch].as_f64() / count);
        let mean_dy = T::of(sum_dy);
        let mean_dy_xh = T::of(sum_dy_xh);
        let m = T::of(count);
        for b in 0..n {
            let off = (b * c + ch) * hw;
            let dst = &mut grad_input.data_mut()[off..off + hw];
            for ((g, &d), &x) in dst.iter_mut().zip(&dy[off..off + hw]).zip(&xh[off..off + hw]) {
                *g = scale * (m * d - mean_dy - x * mean_dy_xh);
            }
        }
    }
    Ok((grad_input, grad_gamma, grad_beta))
}
