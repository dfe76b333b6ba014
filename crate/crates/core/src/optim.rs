//! Learnable parameters, SGD with momentum and weight decay, and the step
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which scheduled learning rate a parameter follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LrGroup {
    /// Rootstock and accompanying branch (ImageNet-initialisable stages).
    Pretrained,
    /// Scion, reduction and classifier heads.
    Fresh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
    pub group: LrGroup,
    /// Whether weight decay applies. Batch-norm affine parameters are exempt.
    pub decay: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>, group: LrGroup, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        let momentum = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            momentum,
            group,
            decay,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub base_lr_pretrained: f64,
    pub base_lr_fresh: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr_pretrained: 0.01,
            base_lr_fresh: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            decay_epochs: vec![40, 60],
            decay_factor: 0.1,
            total_epochs: 80,
            batch_size: 32,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero learning rate is allowed: it freezes the group.
        for (name, v) in [("base_lr_pretrained", self.base_lr_pretrained), ("base_lr_fresh", self.base_lr_fresh)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sgd.{name} must be non-negative, got {v}")));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config(format!("sgd.decay_factor must be positive, got {}", self.decay_factor)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("sgd.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("sgd.weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 || self.total_epochs == 0 {
            return Err(Error::Config("sgd.batch_size and sgd.total_epochs must be positive".into()));
        }
        let increasing = self.decay_epochs.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.decay_epochs.iter().all(|&e| e < self.total_epochs);
        if !increasing || !in_range {
            return Err(Error::Config(format!(
                "sgd.decay_epochs {:?} must be strictly increasing and below total_epochs {}",
                self.decay_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// `(lr_pretrained, lr_fresh)` in effect during `epoch`.
pub fn lr_at_epoch(epoch: usize, cfg: &SgdConfig) -> Result<(f64, f64)> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Invalid(format!(
            "epoch {epoch} is past the schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    let decays = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    let factor = cfg.decay_factor.powi(decays as i32);
    Ok((cfg.base_lr_pretrained * factor, cfg.base_lr_fresh * factor))
}

/// One momentum-SGD update over `params`, then clears their gradients.
///
/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr(group) * v`.
pub fn sgd_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    lr_pretrained: f64,
    lr_fresh: f64,
    cfg: &SgdConfig,
) {
    let mu = T::of(cfg.momentum);
    for p in params {
        let lr = T::of(match p.group {
            LrGroup::Pretrained => lr_pretrained,
            LrGroup::Fresh => lr_fresh,
        });
        let wd = T::of(if p.decay { cfg.weight_decay } else { 0.0 });
        let Parameter {
            value,
            grad,
            momentum,
            ..
        } = p;
        for ((w, g), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(momentum.data_mut().iter_mut())
        {
            *v = mu * *v + (*g + wd * *w);
            *w -= lr * *v;
            *g = T::zero();
        }
    }
}
