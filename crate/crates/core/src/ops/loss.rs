use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Softmax log-loss summed (not averaged) over the batch, with its gradient
/// `softmax - onehot` per row.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::Dim {
            axis: "batch",
            expected: b,
            actual: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(&[b, c]);
    for (i, (row, &y)) in logits.data().chunks(c).zip(labels).enumerate() {
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[y].as_f64() - max);
        let g = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (j, (gj, e)) in g.iter_mut().zip(&exps).enumerate() {
            let onehot = if j == y { 1.0 } else { 0.0 };
            *gj = T::of(e / z - onehot);
        }
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits() {
        let (loss, _) = softmax_cross_entropy(&Tensor::<f32>::zeros(&[1, 2]), &[0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn extreme_logits_are_stable() {
        let x = Tensor::<f32>::new(&[1, 2], vec![1e4, -1e4]).unwrap();
        let (loss, grad) = softmax_cross_entropy(&x, &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn label_out_of_range() {
        let err = softmax_cross_entropy(&Tensor::<f32>::zeros(&[2, 3]), &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, classes: 3 }));
    }

    #[test]
    fn gradient_rows_and_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::from_fn(&[4, 7], |_| rng.gen_range(-3.0..3.0));
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
            let (_, g) = softmax_cross_entropy(&x, &labels).unwrap();
            for row in g.data().chunks(7) {
                assert!(row.iter().sum::<f64>().abs() < 1e-6);
            }
            let num = central_difference(&x, 1e-5, |t| softmax_cross_entropy(t, &labels).unwrap().0);
            assert!(max_relative_error(&g, &num) < 1e-4);
        }
    }
}
