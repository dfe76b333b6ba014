//! Grouped 2-D cross-correlation lowered to GEMM via im2col.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Stride, zero padding and group count of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry::new(1, 0, 1)
    }
}

/// Gradients of [`conv2d`] with respect to each of its inputs.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Output extent of a sliding window along one axis.
pub fn window_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    axis: &'static str,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Invalid(format!("stride on {axis} must be positive")));
    }
    let padded = size + 2 * padding;
    if kernel == 0 || padded < kernel {
        return Err(Error::Dim {
            axis,
            expected: kernel,
            actual: padded,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

struct Plan {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl Plan {
    fn new<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, geom: ConvGeometry) -> Result<Self> {
        let (n, c, h, w) = input.dims4()?;
        let (out_c, kc, kh, kw) = kernel.dims4()?;
        let g = geom.groups;
        if g == 0 {
            return Err(Error::Invalid("groups must be positive".into()));
        }
        if c % g != 0 {
            return Err(Error::Groups {
                axis: "input channels",
                value: c,
                groups: g,
            });
        }
        if out_c % g != 0 {
            return Err(Error::Groups {
                axis: "output channels",
                value: out_c,
                groups: g,
            });
        }
        if kc != c / g {
            return Err(Error::Dim {
                axis: "kernel input channels",
                expected: c / g,
                actual: kc,
            });
        }
        let oh = window_extent(h, kh, geom.stride, geom.padding, "height")?;
        let ow = window_extent(w, kw, geom.stride, geom.padding, "width")?;
        Ok(Plan {
            n,
            c,
            h,
            w,
            out_c,
            kh,
            kw,
            oh,
            ow,
            geom,
        })
    }

    fn in_per_group(&self) -> usize {
        self.c / self.geom.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_c / self.geom.groups
    }

    fn patch(&self) -> usize {
        self.in_per_group() * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    fn im2col<T: Scalar>(&self, plane: &[T], col: &mut [T]) {
        let (h, w, oh, ow) = (self.h, self.w, self.oh, self.ow);
        let (s, p) = (self.geom.stride, self.geom.padding as isize);
        let mut row = 0;
        for c in 0..self.in_per_group() {
            let src = &plane[c * h * w..(c + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], plane: &mut [T]) {
        let (h, w, oh, ow) = (self.h, self.w, self.oh, self.ow);
        let (s, p) = (self.geom.stride, self.geom.padding as isize);
        let mut row = 0;
        for c in 0..self.in_per_group() {
            let dst = &mut plane[c * h * w..(c + 1) * h * w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation.
///
/// `input` is `N x C x H x W`, `kernel` is `O x C/groups x KH x KW`, the
/// optional `bias` has `O` entries.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let plan = Plan::new(input, kernel, geom)?;
    if let Some(b) = bias {
        b.expect_shape(&[plan.out_c])?;
    }
    let (cg, og, patch, positions) = (
        plan.in_per_group(),
        plan.out_per_group(),
        plan.patch(),
        plan.positions(),
    );
    let plane = cg * plan.h * plan.w;
    let mut out = Tensor::zeros(&[plan.n, plan.out_c, plan.oh, plan.ow]);
    let mut col = if plan.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * positions]
    };
    let x = input.data();
    let k = kernel.data();
    let y = out.data_mut();
    for n in 0..plan.n {
        for g in 0..geom.groups {
            let src = &x[(n * plan.c + g * cg) * plan.h * plan.w..][..plane];
            let cols: &[T] = if plan.pointwise() {
                src
            } else {
                plan.im2col(src, &mut col);
                &col
            };
            let dst = &mut y[(n * plan.out_c + g * og) * positions..][..og * positions];
            gemm(
                MatRef::new(&k[g * og * patch..(g + 1) * og * patch], og, patch),
                MatRef::new(cols, patch, positions),
                T::zero(),
                dst,
            );
        }
        if let Some(b) = bias {
            for (o, &bo) in b.data().iter().enumerate() {
                y[(n * plan.out_c + o) * positions..][..positions]
                    .iter_mut()
                    .for_each(|v| *v += bo);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`conv2d`]. `with_bias` controls whether a bias gradient is
/// produced; `need_input` skips the input gradient when the caller has no use
/// for it (first layer of a network).
pub fn conv2d_backward<T: Scalar>(
    upstream: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
    with_bias: bool,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let plan = Plan::new(input, kernel, geom)?;
    upstream.expect_shape(&[plan.n, plan.out_c, plan.oh, plan.ow])?;
    let (cg, og, patch, positions) = (
        plan.in_per_group(),
        plan.out_per_group(),
        plan.patch(),
        plan.positions(),
    );
    let plane = cg * plan.h * plan.w;
    let mut grad_kernel = Tensor::zeros(kernel.shape());
    let mut grad_input = need_input.then(|| Tensor::zeros(input.shape()));
    let mut col = vec![T::zero(); if plan.pointwise() { 0 } else { patch * positions }];
    let mut grad_col = vec![
        T::zero();
        if need_input && !plan.pointwise() {
            patch * positions
        } else {
            0
        }
    ];
    let x = input.data();
    let k = kernel.data();
    let dy = upstream.data();
    for n in 0..plan.n {
        for g in 0..geom.groups {
            let src = &x[(n * plan.c + g * cg) * plan.h * plan.w..][..plane];
            let cols: &[T] = if plan.pointwise() {
                src
            } else {
                plan.im2col(src, &mut col);
                &col
            };
            let dy_g = &dy[(n * plan.out_c + g * og) * positions..][..og * positions];
            let k_g = &k[g * og * patch..(g + 1) * og * patch];
            gemm(
                MatRef::new(dy_g, og, positions),
                MatRef::new(cols, patch, positions).t(),
                T::one(),
                &mut grad_kernel.data_mut()[g * og * patch..(g + 1) * og * patch],
            );
            if let Some(gi) = grad_input.as_mut() {
                let dst = &mut gi.data_mut()[(n * plan.c + g * cg) * plan.h * plan.w..][..plane];
                if plan.pointwise() {
                    gemm(
                        MatRef::new(k_g, og, patch).t(),
                        MatRef::new(dy_g, og, positions),
                        T::zero(),
                        dst,
                    );
                } else {
                    gemm(
                        MatRef::new(k_g, og, patch).t(),
                        MatRef::new(dy_g, og, positions),
                        T::zero(),
                        &mut grad_col,
                    );
                    plan.col2im(&grad_col, dst);
                }
            }
        }
    }
    let grad_bias = with_bias.then(|| {
        let mut gb = Tensor::zeros(&[plan.out_c]);
        for n in 0..plan.n {
            for (o, acc) in gb.data_mut().iter_mut().enumerate() {
                *acc += dy[(n * plan.out_c + o) * positions..][..positions]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        gb
    });
    Ok(ConvGrads {
        input: grad_input,
        kernel: grad_kernel,
        bias: grad_bias,
    })
}
