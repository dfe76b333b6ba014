//! Max pooling, global average pooling and horizontal-stripe average pooling.

use crate::error::{Error, Result};
use crate::ops::conv::window_extent;
use crate::tensor::{Scalar, Tensor};

/// Index (within its `H x W` plane) of the element each pooled output came from.
#[derive(Debug, Clone)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

/// Square-window max pooling with `-inf` padding.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = input.dims4()?;
    if padding * 2 > kernel {
        return Err(Error::Invalid(format!(
            "pool padding {padding} exceeds half the kernel {kernel}"
        )));
    }
    let oh = window_extent(h, kernel, stride, padding, "height")?;
    let ow = window_extent(w, kernel, stride, padding, "width")?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let x = input.data();
    let p = padding as isize;
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out.data_mut()[plane * oh * ow..][..oh * ow];
        let idx = &mut argmax[plane * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - p;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - p;
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for iy in y0.max(0)..(y0 + kernel as isize).min(h as isize) {
                    for ix in x0.max(0)..(x0 + kernel as isize).min(w as isize) {
                        let i = iy as usize * w + ix as usize;
                        // strict comparison keeps the first maximum in scan order
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                dst[oy * ow + ox] = best;
                idx[oy * ow + ox] = best_i as u32;
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each upstream value to the recorded argmax of its window.
pub fn maxpool2d_backward<T: Scalar>(upstream: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    if upstream.len() != indices.argmax.len() {
        return Err(Error::Dim {
            axis: "pooled elements",
            expected: indices.argmax.len(),
            actual: upstream.len(),
        });
    }
    let (h, w) = (indices.input_shape[2], indices.input_shape[3]);
    let (_, _, oh, ow) = upstream.dims4()?;
    let mut grad = Tensor::zeros(&indices.input_shape);
    let g = grad.data_mut();
    for (plane, (ups, idx)) in upstream
        .data()
        .chunks(oh * ow)
        .zip(indices.argmax.chunks(oh * ow))
        .enumerate()
    {
        let dst = &mut g[plane * h * w..][..h * w];
        for (&u, &i) in ups.iter().zip(idx) {
            dst[i as usize] += u;
        }
    }
    Ok(grad)
}

/// Mean over rows `[row_start, row_end)` and all columns: `N x C x H x W -> N x C`.
pub fn avg_pool_region<T: Scalar>(input: &Tensor<T>, row_start: usize, row_end: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    if row_start >= row_end || row_end > h {
        return Err(Error::Invalid(format!(
            "empty or out-of-range pooling region rows {row_start}..{row_end} of height {h}"
        )));
    }
    let inv = 1.0 / ((row_end - row_start) * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    for (plane, o) in out.data_mut().iter_mut().enumerate() {
        let region = &input.data()[plane * h * w + row_start * w..plane * h * w + row_end * w];
        *o = T::of(region.iter().map(|v| v.as_f64()).sum::<f64>() * inv);
    }
    Ok(out)
}

/// Adjoint of [`avg_pool_region`]: spreads `1/(rows*W)` of each upstream value.
pub fn avg_pool_region_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input_shape: &[usize],
    row_start: usize,
    row_end: usize,
) -> Result<Tensor<T>> {
    let mut grad = Tensor::zeros(input_shape);
    accumulate_region_grad(&mut grad, upstream, row_start, row_end)?;
    Ok(grad)
}

/// Adds the adjoint of a region pool into an existing gradient buffer.
pub fn accumulate_region_grad<T: Scalar>(
    grad: &mut Tensor<T>,
    upstream: &Tensor<T>,
    row_start: usize,
    row_end: usize,
) -> Result<()> {
    let (n, c, h, w) = grad.dims4()?;
    upstream.expect_shape(&[n, c])?;
    if row_start >= row_end || row_end > h {
        return Err(Error::Invalid(format!("bad pooling region {row_start}..{row_end}")));
    }
    let inv = T::of(1.0 / ((row_end - row_start) * w) as f64);
    for (plane, &u) in upstream.data().iter().enumerate() {
        let share = u * inv;
        grad.data_mut()[plane * h * w + row_start * w..plane * h * w + row_end * w]
            .iter_mut()
            .for_each(|g| *g += share);
    }
    Ok(())
}

pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, _) = input.dims4()?;
    avg_pool_region(input, 0, h)
}

pub fn global_avg_pool_backward<T: Scalar>(upstream: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    avg_pool_region_backward(upstream, input_shape, 0, input_shape[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ramp_pooling() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 4, 4], |i| i as f32);
        let (y, _) = maxpool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn halving_with_padding() {
        let x = Tensor::<f32>::zeros(&[1, 1, 48, 24]);
        let (y, _) = maxpool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 24, 12]);
        let (y, _) = maxpool2d(&Tensor::<f32>::zeros(&[1, 1, 24, 12]), 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 12, 6]);
    }

    #[test]
    fn constant_input_routes_to_one_element_per_window() {
        let x = Tensor::<f32>::full(&[1, 2, 4, 4], 2.5);
        let (y, idx) = maxpool2d(&x, 2, 2, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        let g = maxpool2d_backward(&Tensor::full(y.shape(), 1.0), &idx).unwrap();
        assert_eq!(g.sum(), 8.0);
        // first element in row-major window order receives the gradient
        assert_eq!(&g.data()[..4], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(&g.data()[4..8], &[0.0; 4]);
    }

    #[test]
    fn kernel_larger_than_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(maxpool2d(&x, 5, 1, 1).is_err());
    }

    #[test]
    fn gap_values_and_linearity() {
        assert_eq!(global_avg_pool(&Tensor::<f32>::full(&[1, 1, 3, 3], 3.0)).unwrap().data(), &[3.0]);
        let x = Tensor::<f32>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |_| rng.gen_range(-1.0..1.0));
        let mix = Tensor::from_fn(a.shape(), |i| 2.0 * a.data()[i] - 0.5 * b.data()[i]);
        let lhs = global_avg_pool(&mix).unwrap();
        let (ga, gb) = (global_avg_pool(&a).unwrap(), global_avg_pool(&b).unwrap());
        for i in 0..6 {
            let direct: f64 = a.data()[i * 20..][..20].iter().sum::<f64>() / 20.0;
            assert!((ga.data()[i] - direct).abs() < 1e-6);
            assert!((lhs.data()[i] - (2.0 * ga.data()[i] - 0.5 * gb.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn region_pooling() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 12, 6], |i| if i < 36 { 1.0 } else { 0.0 });
        assert_eq!(avg_pool_region(&x, 0, 6).unwrap().data(), &[1.0]);
        assert_eq!(avg_pool_region(&x, 6, 12).unwrap().data(), &[0.0]);
        assert_eq!(avg_pool_region(&x, 0, 12).unwrap(), global_avg_pool(&x).unwrap());
        assert!(avg_pool_region(&x, 4, 4).is_err());
        assert!(avg_pool_region(&x, 0, 13).is_err());
    }

    #[test]
    fn pooling_gradients() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // distinct values keep the maxpool argmax stable under the probe
            let mut vals: Vec<f64> = (0..2 * 2 * 6 * 5).map(|i| i as f64 * 0.1).collect();
            for i in (1..vals.len()).rev() {
                vals.swap(i, rng.gen_range(0..=i));
            }
            let x = Tensor::new(&[2, 2, 6, 5], vals).unwrap();
            let (y, idx) = maxpool2d(&x, 3, 2, 1).unwrap();
            let w = Tensor::from_fn(y.shape(), |_| rng.gen_range(-1.0..1.0));
            let g = maxpool2d_backward(&w, &idx).unwrap();
            let num = central_difference(&x, 1e-5, |t| {
                let (y, _) = maxpool2d(t, 3, 2, 1).unwrap();
                y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            });
            assert!(max_relative_error(&g, &num) < 1e-4);

            let up = Tensor::from_fn(&[2, 2], |_| rng.gen_range(-1.0..1.0));
            let g = avg_pool_region_backward(&up, x.shape(), 2, 5).unwrap();
            let num = central_difference(&x, 1e-5, |t| {
                let y = avg_pool_region(t, 2, 5).unwrap();
                y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            });
            assert!(max_relative_error(&g, &num) < 1e-4);
        }
    }
}
