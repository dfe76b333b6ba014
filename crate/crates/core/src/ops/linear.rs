use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// `input (N x D) * weight^T (D x C) + bias`.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = input.dims2()?;
    let (c, wd) = weight.dims2()?;
    if wd != d {
        return Err(Error::Dim {
            axis: "features",
            expected: d,
            actual: wd,
        });
    }
    bias.expect_shape(&[c])?;
    let mut out = Tensor::zeros(&[n, c]);
    for row in out.data_mut().chunks_mut(c) {
        row.copy_from_slice(bias.data());
    }
    gemm(
        MatRef::new(input.data(), n, d),
        MatRef::new(weight.data(), c, d).t(),
        T::one(),
        out.data_mut(),
    );
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, d) = input.dims2()?;
    let (c, _) = weight.dims2()?;
    upstream.expect_shape(&[n, c])?;
    let mut gi = Tensor::zeros(&[n, d]);
    gemm(
        MatRef::new(upstream.data(), n, c),
        MatRef::new(weight.data(), c, d),
        T::zero(),
        gi.data_mut(),
    );
    let mut gw = Tensor::zeros(&[c, d]);
    gemm(
        MatRef::new(upstream.data(), n, c).t(),
        MatRef::new(input.data(), n, d),
        T::zero(),
        gw.data_mut(),
    );
    let mut gb = Tensor::zeros(&[c]);
    for row in upstream.data().chunks(c) {
        for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((gi, gw, gb))
}
