use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Negative slope used by the reduction heads.
pub const REDUCTION_SLOPE: f64 = 0.1;

/// `max(x, slope * x)` for `slope` in `[0, 1]`.
pub fn leaky_relu<T: Scalar>(input: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    input.map(|v| if v > T::zero() { v } else { v * s })
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    leaky_relu(input, 0.0)
}

/// In-place variant that also returns the positive mask needed by
/// [`leaky_relu_backward`].
pub fn leaky_relu_inplace<T: Scalar>(x: &mut Tensor<T>, slope: f64) -> Vec<bool> {
    let s = T::of(slope);
    x.data_mut()
        .iter_mut()
        .map(|v| {
            let pos = *v > T::zero();
            if !pos {
                *v *= s;
            }
            pos
        })
        .collect()
}

/// Slope 1 where the input was strictly positive, `slope` elsewhere
/// (including exactly zero).
pub fn leaky_relu_backward<T: Scalar>(
    upstream: &Tensor<T>,
    positive: &[bool],
    slope: f64,
) -> Result<Tensor<T>> {
    if upstream.len() != positive.len() {
        return Err(crate::Error::Dim {
            axis: "elements",
            expected: positive.len(),
            actual: upstream.len(),
        });
    }
    let s = T::of(slope);
    let mut g = upstream.clone();
    for (v, &p) in g.data_mut().iter_mut().zip(positive) {
        if !p {
            *v *= s;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference_at, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn leaky_values() {
        let x = Tensor::<f64>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = leaky_relu(&x, 0.1);
        assert!((y.data()[0] + 0.1).abs() < 1e-15);
        assert_eq!(&y.data()[1..], &[0.0, 2.0]);
        assert_eq!(leaky_relu(&x, 1.0), x);
    }

    #[test]
    fn relu_values_and_slope_zero() {
        let x = Tensor::<f32>::new(&[3], vec![-3.0, 0.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 3.0]);
        let pos = Tensor::<f32>::from_fn(&[5], |i| 1.0 + i as f32);
        assert_eq!(relu(&pos), pos);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Tensor::<f32>::from_fn(&[64], |_| rng.gen_range(-1.0..1.0));
        assert_eq!(relu(&r), leaky_relu(&r, 0.0));
    }

    #[test]
    fn subgradient_at_zero() {
        let mut x = Tensor::<f64>::new(&[2], vec![0.0, 1.0]).unwrap();
        let mask = leaky_relu_inplace(&mut x, 0.1);
        let up = Tensor::full(&[2], 1.0);
        let g = leaky_relu_backward(&up, &mask, 0.1).unwrap();
        assert_eq!(g.data(), &[0.1, 1.0]);
        let g = leaky_relu_backward(&up, &mask, 0.0).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn gradient_away_from_kinks() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::from_fn(&[16], |_| {
                let m: f64 = rng.gen_range(0.01..2.0);
                if rng.gen_bool(0.5) { m } else { -m }
            });
            let w = Tensor::<f64>::from_fn(&[16], |_| rng.gen_range(-1.0..1.0));
            for slope in [0.0, 0.1] {
                let mut y = x.clone();
                let mask = leaky_relu_inplace(&mut y, slope);
                let g = leaky_relu_backward(&w, &mask, slope).unwrap();
                for i in 0..16 {
                    let num = central_difference_at(&x, i, 1e-5, |t| {
                        leaky_relu(t, slope).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
                    });
                    assert!(relative_error(g.data()[i], num) < 1e-6);
                }
            }
        }
    }
}
