//! Stateful layer wrappers: each owns its parameters, caches what its
//! backward pass needs during a train-mode forward, and accumulates
//! parameter gradients on backward.

use crate::error::{Error, Result};
use crate::ops::activation::{leaky_relu_backward, leaky_relu_inplace};
use crate::ops::conv::{conv2d, conv2d_backward, ConvGeometry};
use crate::ops::linear::{linear, linear_backward};
use crate::ops::norm::{batchnorm2d_backward, batchnorm2d_eval, batchnorm2d_train, BnCache, RunningStats, BN_EPS};
use crate::ops::pool::{maxpool2d, maxpool2d_backward, PoolIndices};
use crate::optim::{LrGroup, Parameter};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches for backward.
    Train,
    /// Running statistics, nothing cached.
    Eval,
}

/// A named stored tensor reached while walking a module tree.
pub enum Slot<'a, T> {
    Param(&'a Parameter<T>),
    Buffer(&'a Tensor<T>),
}

pub enum SlotMut<'a, T> {
    Param(&'a mut Parameter<T>),
    Buffer(&'a mut Tensor<T>),
}

/// Walks every parameter and buffer under a dotted name prefix.
pub trait Visit<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>));
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn missing_cache(layer: &str) -> Error {
    Error::Invalid(format!("{layer}: backward called without a train-mode forward"))
}

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Parameter<T>,
    pub geom: ConvGeometry,
    /// First layer of the network: its input gradient is never needed.
    pub skip_input_grad: bool,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, geom: ConvGeometry, group: LrGroup) -> Self {
        let w = Tensor::zeros(&[out_c, in_c / geom.groups, kernel, kernel]);
        Conv2d {
            weight: Parameter::new(w, group, true),
            geom,
            skip_input_grad: false,
            cache: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = conv2d(&x, &self.weight.value, None, self.geom)?;
        if mode == Mode::Train {
            self.cache = Some(x);
        }
        Ok(y)
    }

    /// Returns the input gradient (an all-zero placeholder is never built when
    /// `skip_input_grad` is set; `None` is returned instead).
    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("conv"))?;
        let grads = conv2d_backward(g, &x, &self.weight.value, self.geom, false, !self.skip_input_grad)?;
        self.weight.accumulate(&grads.kernel)?;
        Ok(grads.input)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Visit<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        f(join(prefix, "weight"), Slot::Param(&self.weight));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.weight));
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running: RunningStats<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, group: LrGroup) -> Self {
        BatchNorm2d {
            gamma: Parameter::new(Tensor::full(&[channels], T::one()), group, false),
            beta: Parameter::new(Tensor::zeros(&[channels]), group, false),
            running: RunningStats::new(channels),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => {
                let (y, cache) =
                    batchnorm2d_train(x, &self.gamma.value, &self.beta.value, &mut self.running, BN_EPS)?;
                self.cache = Some(cache);
                Ok(y)
            }
            Mode::Eval => batchnorm2d_eval(x, &self.gamma.value, &self.beta.value, &self.running, BN_EPS),
        }
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batch norm"))?;
        let (gx, gg, gb) = batchnorm2d_backward(g, &cache, &self.gamma.value)?;
        self.gamma.accumulate(&gg)?;
        self.beta.accumulate(&gb)?;
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Visit<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        f(join(prefix, "weight"), Slot::Param(&self.gamma));
        f(join(prefix, "bias"), Slot::Param(&self.beta));
        f(join(prefix, "running_mean"), Slot::Buffer(&self.running.mean));
        f(join(prefix, "running_var"), Slot::Buffer(&self.running.var));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.gamma));
        f(join(prefix, "bias"), SlotMut::Param(&mut self.beta));
        f(join(prefix, "running_mean"), SlotMut::Buffer(&mut self.running.mean));
        f(join(prefix, "running_var"), SlotMut::Buffer(&mut self.running.var));
    }
}

/// ReLU (`slope = 0`) or leaky ReLU.
#[derive(Debug, Clone, Default)]
pub struct Activation {
    pub slope: f64,
    mask: Option<Vec<bool>>,
}

impl Activation {
    pub fn relu() -> Self {
        Activation::leaky(0.0)
    }

    pub fn leaky(slope: f64) -> Self {
        Activation { slope, mask: None }
    }

    pub fn forward<T: Scalar>(&mut self, mut x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let mask = leaky_relu_inplace(&mut x, self.slope);
        if mode == Mode::Train {
            self.mask = Some(mask);
        }
        x
    }

    pub fn backward<T: Scalar>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("activation"))?;
        leaky_relu_backward(g, &mask, self.slope)
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<PoolIndices>,
}

impl MaxPool2d {
    /// The 3x3, stride 2, padding 1 pool used throughout the network.
    pub fn halving() -> Self {
        MaxPool2d {
            kernel: 3,
            stride: 2,
            padding: 1,
            cache: None,
        }
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (y, idx) = maxpool2d(x, self.kernel, self.stride, self.padding)?;
        if mode == Mode::Train {
            self.cache = Some(idx);
        }
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let idx = self.cache.take().ok_or_else(|| missing_cache("max pool"))?;
        maxpool2d_backward(g, &idx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Fully connected classifier `N x D -> N x C`, with bias.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, group: LrGroup) -> Self {
        Linear {
            weight: Parameter::new(Tensor::zeros(&[out_dim, in_dim]), group, true),
            bias: Parameter::new(Tensor::zeros(&[out_dim]), group, true),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = linear(&x, &self.weight.value, &self.bias.value)?;
        if mode == Mode::Train {
            self.cache = Some(x);
        }
        Ok(y)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing_cache("linear"))?;
        let (gx, gw, gb) = linear_backward(g, &x, &self.weight.value)?;
        self.weight.accumulate(&gw)?;
        self.bias.accumulate(&gb)?;
        Ok(gx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

impl<T: Scalar> Visit<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        f(join(prefix, "weight"), Slot::Param(&self.weight));
        f(join(prefix, "bias"), Slot::Param(&self.bias));
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        f(join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        f(join(prefix, "bias"), SlotMut::Param(&mut self.bias));
    }
}

/// Convolution followed by batch norm, the unit every block is made of.
#[derive(Debug, Clone)]
pub struct ConvBn<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, geom: ConvGeometry, group: LrGroup) -> Self {
        ConvBn {
            conv: Conv2d::new(in_c, out_c, kernel, geom, group),
            bn: BatchNorm2d::new(out_c, group),
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x, mode)?;
        self.bn.forward(&y, mode)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let g = self.bn.backward(g)?;
        self.conv.backward(&g)
    }

    pub fn clear_cache(&mut self) {
        self.conv.clear_cache();
        self.bn.clear_cache();
    }

    /// Visits the conv weight as `<conv>.weight` and the norm as `<bn>.*`.
    pub fn visit_as<'a>(&'a self, conv: &str, bn: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        self.conv.visit(conv, f);
        self.bn.visit(bn, f);
    }

    pub fn visit_mut_as<'a>(&'a mut self, conv: &str, bn: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        self.conv.visit_mut(conv, f);
        self.bn.visit_mut(bn, f);
    }
}

impl<T: Scalar> Visit<T> for ConvBn<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        self.visit_as(&join(prefix, "conv"), &join(prefix, "bn"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        self.visit_mut_as(&join(prefix, "conv"), &join(prefix, "bn"), f);
    }
}

/// Concatenates two `N x Ci x H x W` tensors along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::new(&[n, ca + cb, h, w], data)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.dims4()?;
    if ca == 0 || ca >= c {
        return Err(Error::Invalid(format!("cannot split {c} channels at {ca}")));
    }
    let hw = h * w;
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * hw);
    let mut b = Vec::with_capacity(n * cb * hw);
    for img in x.data().chunks(c * hw) {
        a.extend_from_slice(&img[..ca * hw]);
        b.extend_from_slice(&img[ca * hw..]);
    }
    Ok((Tensor::new(&[n, ca, h, w], a)?, Tensor::new(&[n, cb, h, w], b)?))
}
