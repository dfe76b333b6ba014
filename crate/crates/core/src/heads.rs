//! Multi-level and part-based reduction heads, their classifiers, the joint
//! softmax objective and the accompanying branch's objective.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{join, Activation, BatchNorm2d, Conv2d, Linear, Mode, Slot, SlotMut, Visit};
use crate::ops::activation::REDUCTION_SLOPE;
use crate::ops::conv::ConvGeometry;
use crate::ops::loss::softmax_cross_entropy;
use crate::ops::pool::{accumulate_region_grad, avg_pool_region};
use crate::optim::LrGroup;
use crate::tensor::{Scalar, Tensor};

/// Where a head pools its input from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadSource {
    /// Global average pool of a whole tap.
    Whole { tap: String },
    /// Stripe `index` (top to bottom) of `parts` equal horizontal stripes of a tap.
    Part { tap: String, parts: usize, index: usize },
}

impl HeadSource {
    pub fn tap(&self) -> &str {
        match self {
            HeadSource::Whole { tap } | HeadSource::Part { tap, .. } => tap,
        }
    }

    /// Row range of this head within a map of height `h`.
    pub fn rows(&self, h: usize) -> Result<(usize, usize)> {
        match *self {
            HeadSource::Whole { .. } => Ok((0, h)),
            HeadSource::Part { parts, index, .. } => {
                if parts == 0 || h % parts != 0 || index >= parts {
                    return Err(Error::Invalid(format!(
                        "height {h} cannot be split into {parts} stripes (stripe {index})"
                    )));
                }
                let step = h / parts;
                Ok((index * step, (index + 1) * step))
            }
        }
    }
}

impl std::fmt::Display for HeadSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadSource::Whole { tap } => write!(f, "{tap}"),
            HeadSource::Part { tap, parts, index } => write!(f, "{tap}[{}/{parts}]", index + 1),
        }
    }
}

/// Horizontal stripe means of a tap, top to bottom.
pub fn part_pool<T: Scalar>(tap: &Tensor<T>, parts: usize) -> Result<Vec<Tensor<T>>> {
    let (_, _, h, _) = tap.dims4()?;
    if parts == 0 || h % parts != 0 {
        return Err(Error::Invalid(format!("height {h} is not divisible by {parts} parts")));
    }
    let step = h / parts;
    (0..parts)
        .map(|i| avg_pool_region(tap, i * step, (i + 1) * step))
        .collect()
}

/// Group 1x1 conv (no bias), BN and leaky ReLU(0.1) on a pooled vector.
#[derive(Debug, Clone)]
pub struct ReductionHead<T> {
    pub source: HeadSource,
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    act: Activation,
    tap_shape: Option<Vec<usize>>,
}

impl<T: Scalar> ReductionHead<T> {
    pub fn new(source: HeadSource, in_dim: usize, out_dim: usize, groups: usize) -> Self {
        ReductionHead {
            source,
            conv: Conv2d::new(in_dim, out_dim, 1, ConvGeometry::new(1, 0, groups), LrGroup::Fresh),
            bn: BatchNorm2d::new(out_dim, LrGroup::Fresh),
            act: Activation::leaky(REDUCTION_SLOPE),
            tap_shape: None,
        }
    }

    /// `tap` (`N x C x H x W`) to the reduced `N x D` feature.
    pub fn forward(&mut self, tap: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, h, _) = tap.dims4()?;
        let (r0, r1) = self.source.rows(h)?;
        let pooled = avg_pool_region(tap, r0, r1)?.reshape(&[n, c, 1, 1])?;
        let y = self.conv.forward(pooled, mode)?;
        let y = self.bn.forward(&y, mode)?;
        let d = y.shape()[1];
        if mode == Mode::Train {
            self.tap_shape = Some(tap.shape().to_vec());
        }
        self.act.forward(y, mode).reshape(&[n, d])
    }

    /// Adds this head's contribution to the gradient of its tap.
    pub fn backward(&mut self, g: &Tensor<T>, tap_grad: &mut Tensor<T>) -> Result<()> {
        let shape = self.tap_shape.take().ok_or_else(|| Error::Invalid("head backward without forward".into()))?;
        tap_grad.expect_shape(&shape)?;
        let (n, d) = g.dims2()?;
        let g = self.act.backward(&g.clone().reshape(&[n, d, 1, 1])?)?;
        let g = self.bn.backward(&g)?;
        let g = self.conv.backward(&g)?.expect("input grad");
        let (r0, r1) = self.source.rows(shape[2])?;
        accumulate_region_grad(tap_grad, &g.reshape(&[n, shape[1]])?, r0, r1)
    }
}

impl<T: Scalar> Visit<T> for ReductionHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Output of one head for a batch.
#[derive(Debug, Clone)]
pub struct HeadOutput<T> {
    /// 1-based position in the fixed head order.
    pub index: usize,
    pub reduced: Tensor<T>,
    /// Classifier logits; only produced in train mode.
    pub logits: Option<Tensor<T>>,
}

/// Named tap maps of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct TapSet<T> {
    pub maps: BTreeMap<String, Tensor<T>>,
    /// Pooled output of the accompanying branch (train mode only).
    pub accompanying: Option<Tensor<T>>,
}

impl<T: Scalar> TapSet<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.maps
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no tap named `{name}`")))
    }
}

/// The reduction heads and, unless stripped, one classifier per head.
#[derive(Debug, Clone)]
pub struct HeadSet<T> {
    pub reductions: Vec<ReductionHead<T>>,
    pub classifiers: Vec<Linear<T>>,
}

impl<T: Scalar> HeadSet<T> {
    pub fn len(&self) -> usize {
        self.reductions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reductions.is_empty()
    }

    /// Reduced features of every head; logits too in train mode when
    /// classifiers are present.
    pub fn compute(&mut self, taps: &TapSet<T>, mode: Mode) -> Result<Vec<HeadOutput<T>>> {
        let with_logits = mode == Mode::Train && !self.classifiers.is_empty();
        let mut out = Vec::with_capacity(self.reductions.len());
        for (k, head) in self.reductions.iter_mut().enumerate() {
            let reduced = head.forward(taps.get(head.source.tap())?, mode)?;
            let logits = if with_logits {
                Some(self.classifiers[k].forward(reduced.clone(), mode)?)
            } else {
                None
            };
            out.push(HeadOutput {
                index: k + 1,
                reduced,
                logits,
            });
        }
        Ok(out)
    }

    /// Back-propagates per-head logit gradients into per-tap gradients.
    pub fn backward(&mut self, logit_grads: &[Tensor<T>], taps: &TapSet<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        if logit_grads.len() != self.reductions.len() {
            return Err(Error::Dim {
                axis: "heads",
                expected: self.reductions.len(),
                actual: logit_grads.len(),
            });
        }
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for ((head, clf), g) in self.reductions.iter_mut().zip(&mut self.classifiers).zip(logit_grads) {
            let gr = clf.backward(g)?;
            let tap = head.source.tap().to_string();
            let buf = match grads.entry(tap) {
                std::collections::btree_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::btree_map::Entry::Vacant(e) => {
                    let shape = taps.get(e.key())?.shape().to_vec();
                    e.insert(Tensor::zeros(&shape))
                }
            };
            head.backward(&gr, buf)?;
        }
        Ok(grads)
    }
}

impl<T: Scalar> Visit<T> for HeadSet<T> {
    fn visit<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        for (k, h) in self.reductions.iter().enumerate() {
            h.visit(&format!("reduction.h{}", k + 1), f);
        }
        for (k, c) in self.classifiers.iter().enumerate() {
            c.visit(&format!("objective.h{}", k + 1), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, _prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        for (k, h) in self.reductions.iter_mut().enumerate() {
            h.visit_mut(&format!("reduction.h{}", k + 1), f);
        }
        for (k, c) in self.classifiers.iter_mut().enumerate() {
            c.visit_mut(&format!("objective.h{}", k + 1), f);
        }
    }
}

/// Labels of a batch together with the class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabels {
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl BatchLabels {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(BatchLabels { labels, num_classes })
    }
}

/// Sum of per-head losses and the gradient of that sum w.r.t. each head's logits.
#[derive(Debug, Clone)]
pub struct JointLoss<T> {
    pub total: f64,
    pub per_head: Vec<f64>,
    pub logit_grads: Vec<Tensor<T>>,
}

/// Joint objective: the per-head softmax log-losses summed in head order.
pub fn joint_loss<T: Scalar>(heads: &[HeadOutput<T>], labels: &BatchLabels) -> Result<JointLoss<T>> {
    let mut per_head = Vec::with_capacity(heads.len());
    let mut logit_grads = Vec::with_capacity(heads.len());
    for h in heads {
        let logits = h
            .logits
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("head {} has no logits (eval mode?)", h.index)))?;
        let (_, c) = logits.dims2()?;
        if c != labels.num_classes {
            return Err(Error::Dim {
                axis: "classes",
                expected: labels.num_classes,
                actual: c,
            });
        }
        let (loss, grad) = softmax_cross_entropy(logits, &labels.labels)?;
        per_head.push(loss);
        logit_grads.push(grad);
    }
    let total = per_head.iter().sum();
    Ok(JointLoss {
        total,
        per_head,
        logit_grads,
    })
}

/// Softmax log-loss of the accompanying branch's single classifier.
/// Returns the loss and the gradient w.r.t. the pooled branch feature.
pub fn accompanying_loss<T: Scalar>(
    feature: &Tensor<T>,
    classifier: &mut Linear<T>,
    labels: &BatchLabels,
    mode: Mode,
) -> Result<(f64, Option<Tensor<T>>)> {
    let logits = classifier.forward(feature.clone(), mode)?;
    let (loss, g) = softmax_cross_entropy(&logits, &labels.labels)?;
    let grad = match mode {
        Mode::Train => Some(classifier.backward(&g)?),
        Mode::Eval => None,
    };
    Ok((loss, grad))
}

/// Concatenates the reduced features in head order: `N x (heads * D)`.
pub fn concat_feature<T: Scalar>(heads: &[HeadOutput<T>]) -> Result<Tensor<T>> {
    let first = heads.first().ok_or_else(|| Error::Invalid("no heads to concatenate".into()))?;
    let (n, _) = first.reduced.dims2()?;
    let widths: Vec<usize> = heads.iter().map(|h| h.reduced.shape()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for (h, &d) in heads.iter().zip(&widths) {
            if h.reduced.shape()[0] != n {
                return Err(Error::Dim {
                    axis: "batch",
                    expected: n,
                    actual: h.reduced.shape()[0],
                });
            }
            data.extend_from_slice(&h.reduced.data()[i * d..(i + 1) * d]);
        }
    }
    Tensor::new(&[n, total], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn part_pool_stripes() {
        let x = Tensor::<f32>::from_fn(&[1, 1, 12, 6], |i| if i < 36 { 3.0 } else { -1.0 });
        let one = part_pool(&x, 1).unwrap();
        assert_eq!(one[0], crate::ops::pool::global_avg_pool(&x).unwrap());
        let two = part_pool(&x, 2).unwrap();
        assert_eq!((two[0].data()[0], two[1].data()[0]), (3.0, -1.0));
        assert!(part_pool(&x, 5).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(&[2, 3, 12, 6], |_| rng.gen_range(-1.0..1.0));
        let three = part_pool(&x, 3).unwrap();
        for (i, stripe) in three.iter().enumerate() {
            for plane in 0..6 {
                let rows = &x.data()[plane * 72 + i * 24..plane * 72 + (i + 1) * 24];
                let direct = rows.iter().sum::<f64>() / 24.0;
                assert!((stripe.data()[plane] - direct).abs() < 1e-12);
            }
        }
        // stripes weighted by height recover the global mean
        let gap = crate::ops::pool::global_avg_pool(&x).unwrap();
        for plane in 0..6 {
            let mean = three.iter().map(|s| s.data()[plane]).sum::<f64>() / 3.0;
            assert!((mean - gap.data()[plane]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_tap_reduces_to_beta() {
        let mut head = ReductionHead::<f32>::new(HeadSource::Whole { tap: "t".into() }, 16, 8, 4);
        let taps = Tensor::zeros(&[2, 16, 4, 2]);
        let y = head.forward(&taps, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        head.bn.beta.value.fill(-2.0);
        let y = head.forward(&taps, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v + 0.2).abs() < 1e-7));
    }

    #[test]
    fn uniform_logits_joint_loss() {
        let c = 5;
        let heads: Vec<HeadOutput<f64>> = (1..=9)
            .map(|k| HeadOutput {
                index: k,
                reduced: Tensor::zeros(&[1, 4]),
                logits: Some(Tensor::zeros(&[1, c])),
            })
            .collect();
        let labels = BatchLabels::new(vec![2], c).unwrap();
        let j = joint_loss(&heads, &labels).unwrap();
        assert!((j.total - 9.0 * (c as f64).ln()).abs() < 1e-12);
        assert!((j.per_head.iter().sum::<f64>() - j.total).abs() < 1e-6);
        let eval: Vec<HeadOutput<f64>> = heads.into_iter().map(|h| HeadOutput { logits: None, ..h }).collect();
        assert!(joint_loss(&eval, &labels).is_err());
        assert!(BatchLabels::new(vec![5], c).is_err());
    }

    #[test]
    fn uniform_accompanying_loss() {
        let mut clf = Linear::<f64>::new(6, 4, LrGroup::Pretrained);
        let labels = BatchLabels::new(vec![1], 4).unwrap();
        let (loss, g) = accompanying_loss(&Tensor::full(&[1, 6], 0.3), &mut clf, &labels, Mode::Train).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(g.unwrap().shape(), &[1, 6]);
    }

    #[test]
    fn concat_layout() {
        let heads: Vec<HeadOutput<f32>> = (1..=9)
            .map(|k| HeadOutput {
                index: k,
                reduced: Tensor::from_fn(&[2, 256], |i| if i % 256 == k - 1 { k as f32 } else { 0.0 }),
                logits: None,
            })
            .collect();
        let f = concat_feature(&heads).unwrap();
        assert_eq!(f.shape(), &[2, 2304]);
        for row in f.data().chunks(2304) {
            for k in 1..=9 {
                assert_eq!(row[256 * (k - 1) + (k - 1)], k as f32);
            }
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 9);
        }
    }
}
