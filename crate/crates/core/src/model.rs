//! End-to-end assembly: rootstock, scion, reduction and objective heads, and
//! the optional accompanying branch. Parameter counting, initialization and
//! weight (de)serialization live here too.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::WeightArchive;
use crate::blocks::{build_units, check_chain, make_accompanying, make_rootstock, make_scion, Arch, Unit};
use crate::error::{Error, Result};
use crate::heads::{
    accompanying_loss, concat_feature, joint_loss, BatchLabels, HeadOutput, HeadSet, HeadSource, ReductionHead,
    TapSet,
};
use crate::layers::{join, Linear, Mode, Slot, SlotMut, Visit};
use crate::ops::pool::{global_avg_pool, global_avg_pool_backward};
use crate::optim::{LrGroup, Parameter};
use crate::tensor::{Scalar, Tensor};

/// Top-level name scopes. Every stored tensor lives under exactly one.
pub const SCOPES: [&str; 5] = ["rootstock", "scion", "reduction", "objective", "accompanying"];

#[derive(Debug, Clone, PartialEq)]
pub struct GraftedNetConfig {
    pub num_classes: usize,
    pub reduction_groups: usize,
    pub reduced_dim: usize,
    /// Stripe counts pooled from the last scion map; `1` is the whole map.
    pub part_scheme: Vec<usize>,
    /// Scion units whose whole-map pooled output gets its own head.
    pub tap_points: Vec<String>,
    pub with_accompanying: bool,
    /// Classifier heads present (false after stripping for inference).
    pub with_objective: bool,
    pub arch: Arch,
}

impl GraftedNetConfig {
    pub fn new(num_classes: usize) -> Self {
        Self::with_arch(num_classes, Arch::standard())
    }

    /// Full topology at gradient-check scale; reduced width 16, groups 8.
    pub fn tiny(num_classes: usize) -> Self {
        GraftedNetConfig {
            reduced_dim: 16,
            ..Self::with_arch(num_classes, Arch::tiny())
        }
    }

    /// Full topology on [`Arch::desk`]; reduced width 64, groups 8.
    pub fn desk(num_classes: usize) -> Self {
        GraftedNetConfig {
            reduced_dim: 64,
            ..Self::with_arch(num_classes, Arch::desk())
        }
    }

    pub fn with_arch(num_classes: usize, arch: Arch) -> Self {
        let last4 = format!("fire_conv4{}", (b'a' + arch.fire4.2 as u8 - 1) as char);
        GraftedNetConfig {
            num_classes,
            reduction_groups: 8,
            reduced_dim: 256,
            part_scheme: vec![1, 2, 3],
            tap_points: vec![last4, "fire_conv5a".into(), "fire_conv5b".into()],
            with_accompanying: true,
            with_objective: true,
            arch,
        }
    }

    /// Name of the final scion unit, the source of the part heads.
    pub fn final_tap(&self) -> String {
        "fire_conv5c".into()
    }

    /// Heads in their fixed order: whole-map taps, then each part scheme's
    /// stripes top to bottom.
    pub fn head_sources(&self) -> Vec<HeadSource> {
        let mut heads: Vec<HeadSource> = self
            .tap_points
            .iter()
            .map(|t| HeadSource::Whole { tap: t.clone() })
            .collect();
        for &parts in &self.part_scheme {
            if parts == 1 {
                heads.push(HeadSource::Whole { tap: self.final_tap() });
            } else {
                heads.extend((0..parts).map(|index| HeadSource::Part {
                    tap: self.final_tap(),
                    parts,
                    index,
                }));
            }
        }
        heads
    }

    pub fn head_count(&self) -> usize {
        self.head_sources().len()
    }

    pub fn feature_dim(&self) -> usize {
        self.head_count() * self.reduced_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.num_classes < 2 && self.with_objective {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        let g = self.reduction_groups;
        for (what, c) in [
            ("fire_conv4x width", self.arch.fire4_channels()),
            ("fire_conv5x width", self.arch.fire5_channels()),
            ("reduced_dim", self.reduced_dim),
        ] {
            if g == 0 || c % g != 0 {
                return Err(Error::Config(format!("reduction_groups {g} does not divide {what} {c}")));
            }
        }
        let (h, _) = self.arch.final_hw();
        for &p in &self.part_scheme {
            if p == 0 || h % p != 0 {
                return Err(Error::Config(format!(
                    "final map height {h} is not divisible by part count {p}"
                )));
            }
        }
        let scion: Vec<String> = make_scion(&self.arch)
            .iter()
            .flat_map(|s| s.units.iter().map(|u| u.name.clone()))
            .collect();
        for t in &self.tap_points {
            if !scion.contains(t) {
                return Err(Error::Config(format!("tap point `{t}` is not a scion unit")));
            }
        }
        if self.head_count() == 0 {
            return Err(Error::Config("at least one head is required".into()));
        }
        Ok(())
    }

    fn tap_channels(&self, tap: &str) -> usize {
        if tap.starts_with("fire_conv4") {
            self.arch.fire4_channels()
        } else {
            self.arch.fire5_channels()
        }
    }
}

/// The structural ablations of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// No accompanying branch.
    NoAccompanying,
    /// Whole-map heads only (4 heads).
    NoParts,
    /// Part heads of the last map only (6 heads).
    NoMultiLevel,
    /// A single whole-map head on the last map.
    NoMultiLevelNoParts,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoAccompanying,
        Ablation::NoParts,
        Ablation::NoMultiLevel,
        Ablation::NoMultiLevelNoParts,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAccompanying => "-AL",
            Ablation::NoParts => "-PF",
            Ablation::NoMultiLevel => "-MF",
            Ablation::NoMultiLevelNoParts => "-MF-PF",
        }
    }

    pub fn apply(self, mut cfg: GraftedNetConfig) -> GraftedNetConfig {
        match self {
            Ablation::Full => {}
            Ablation::NoAccompanying => cfg.with_accompanying = false,
            Ablation::NoParts => cfg.part_scheme = vec![1],
            Ablation::NoMultiLevel => cfg.tap_points.clear(),
            Ablation::NoMultiLevelNoParts => {
                cfg.tap_points.clear();
                cfg.part_scheme = vec![1];
            }
        }
        cfg
    }
}

/// Training-only branch: ResNet stages 4-5, global pooling, one classifier.
#[derive(Debug, Clone)]
pub struct Accompanying<T> {
    pub units: Vec<Unit<T>>,
    pub classifier: Option<Linear<T>>,
    pooled_shape: Option<Vec<usize>>,
}

/// Which loss terms feed the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub joint: bool,
    pub accompanying: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        joint: true,
        accompanying: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub joint: f64,
    pub per_head: Vec<f64>,
    pub accompanying: Option<f64>,
}

impl BatchLoss {
    /// Joint loss plus the accompanying loss, unweighted.
    pub fn total(&self) -> f64 {
        self.joint + self.accompanying.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct GraftedNet<T = f32> {
    pub config: GraftedNetConfig,
    pub rootstock: Vec<Unit<T>>,
    pub scion: Vec<Unit<T>>,
    pub heads: HeadSet<T>,
    pub accompanying: Option<Accompanying<T>>,
}

fn in_scope(name: &str, scope: &str) -> bool {
    scope.is_empty() || name == scope || (name.starts_with(scope) && name.as_bytes().get(scope.len()) == Some(&b'.'))
}

impl<T: Scalar> GraftedNet<T> {
    /// Builds the network with every weight zero and every BN at identity;
    /// call [`GraftedNet::init_params`] before use.
    pub fn build(config: GraftedNetConfig) -> Result<Self> {
        config.validate()?;
        let arch = &config.arch;
        let root_spec = make_rootstock(arch);
        let scion_spec = make_scion(arch);
        check_chain(&root_spec, 3)?;
        check_chain(&scion_spec, arch.rootstock_channels())?;
        let rootstock = build_units(&root_spec, LrGroup::Pretrained)?;
        let scion = build_units(&scion_spec, LrGroup::Fresh)?;
        let reductions = config
            .head_sources()
            .into_iter()
            .map(|src| {
                let c = config.tap_channels(src.tap());
                ReductionHead::new(src, c, config.reduced_dim, config.reduction_groups)
            })
            .collect::<Vec<_>>();
        let classifiers = if config.with_objective {
            (0..reductions.len())
                .map(|_| Linear::new(config.reduced_dim, config.num_classes, LrGroup::Fresh))
                .collect()
        } else {
            Vec::new()
        };
        let accompanying = if config.with_accompanying {
            let spec = make_accompanying(arch);
            check_chain(&spec, arch.rootstock_channels())?;
            Some(Accompanying {
                units: build_units(&spec, LrGroup::Pretrained)?,
                // The branch's classifier trains with the rest of the branch.
                classifier: config
                    .with_objective
                    .then(|| Linear::new(arch.accompanying_channels(), config.num_classes, LrGroup::Pretrained)),
                pooled_shape: None,
            })
        } else {
            None
        };
        Ok(GraftedNet {
            config,
            rootstock,
            scion,
            heads: HeadSet {
                reductions,
                classifiers,
            },
            accompanying,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, s| {
            if matches!(s, Slot::Param(_)) {
                names.push(n);
            }
        });
        names
    }

    /// Learnable scalars under any of `scopes` (dotted-name prefixes); an
    /// empty list counts everything.
    pub fn count_params(&self, scopes: &[&str]) -> usize {
        let mut total = 0;
        self.visit("", &mut |name, s| {
            if let Slot::Param(p) = s {
                if scopes.is_empty() || scopes.iter().any(|sc| in_scope(&name, sc)) {
                    total += p.len();
                }
            }
        });
        total
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, s| {
            if let SlotMut::Param(p) = s {
                out.push(p);
            }
        });
        out
    }

    /// The parameter stored under `name`, if any.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        let mut found = None;
        self.visit_mut("", &mut |n, s| {
            if let (SlotMut::Param(p), true) = (s, n == name) {
                found = Some(p);
            }
        });
        found
    }

    pub fn zero_grads(&mut self) {
        self.parameters_mut().into_iter().for_each(Parameter::zero_grad);
    }

    /// Fan-in scaled Gaussian (`std = sqrt(2 / fan_in)`) for conv and linear
    /// weights, zero biases, identity batch norms, zero momentum. With an
    /// archive, every rootstock (and accompanying) tensor is copied from it.
    pub fn init_params(&mut self, seed: u64, pretrained: Option<&WeightArchive>) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.visit_mut("", &mut |name, slot| match slot {
            SlotMut::Param(p) => {
                p.grad.fill(T::zero());
                p.momentum.fill(T::zero());
                let rank = p.value.rank();
                if name.ends_with(".weight") && rank >= 2 {
                    let fan_in = p.len() / p.shape()[0];
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    p.value.data_mut().iter_mut().for_each(|w| *w = T::of(normal.sample(&mut rng)));
                } else if name.ends_with(".weight") && !p.decay {
                    p.value.fill(T::one());
                } else {
                    p.value.fill(T::zero());
                }
            }
            SlotMut::Buffer(b) => {
                let v = if name.ends_with("running_var") { T::one() } else { T::zero() };
                b.fill(v);
            }
        });
        if let Some(archive) = pretrained {
            self.load_pretrained(archive)?;
        }
        Ok(())
    }

    fn load_pretrained(&mut self, archive: &WeightArchive) -> Result<()> {
        let has_acc = self.accompanying.is_some();
        for name in archive.names() {
            let wanted = in_scope(name, "rootstock") || in_scope(name, "accompanying");
            if !wanted {
                return Err(Error::Archive(format!(
                    "pretrained archive entry `{name}` is outside the rootstock and accompanying branch"
                )));
            }
        }
        let mut missing = None;
        let mut result = Ok(());
        self.visit_mut("", &mut |name, slot| {
            let target = in_scope(&name, "rootstock") || (has_acc && in_scope(&name, "accompanying"));
            if !target || result.is_err() {
                return;
            }
            let Some(entry) = archive.get(&name) else {
                missing.get_or_insert(name);
                return;
            };
            let dst = match slot {
                SlotMut::Param(p) => &mut p.value,
                SlotMut::Buffer(b) => b,
            };
            result = copy_entry(&name, entry.to_tensor(), dst);
        });
        result?;
        if let Some(name) = missing {
            return Err(Error::Archive(format!("pretrained archive lacks `{name}`")));
        }
        Ok(())
    }

    /// Every parameter and buffer, as `f32`, sorted by name.
    pub fn save_weights(&self) -> Result<WeightArchive> {
        let mut archive = WeightArchive::new();
        let mut result = Ok(());
        self.visit("", &mut |name, slot| {
            if result.is_ok() {
                let t = match slot {
                    Slot::Param(p) => &p.value,
                    Slot::Buffer(b) => b,
                };
                result = archive.insert_tensor(&name, t);
            }
        });
        result?;
        Ok(archive)
    }

    /// Requires an exact name and shape match in both directions.
    pub fn load_weights(&mut self, archive: &WeightArchive) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        self.visit("", &mut |n, _| {
            names.insert(n);
        });
        if let Some(extra) = archive.names().find(|n| !names.contains(*n)) {
            return Err(Error::Archive(format!("unknown tensor `{extra}` in archive")));
        }
        if let Some(missing) = names.iter().find(|n| archive.get(n).is_none()) {
            return Err(Error::Archive(format!("archive lacks tensor `{missing}`")));
        }
        let mut result = Ok(());
        self.visit_mut("", &mut |name, slot| {
            if result.is_err() {
                return;
            }
            let entry = archive.get(&name).expect("checked above");
            let dst = match slot {
                SlotMut::Param(p) => &mut p.value,
                SlotMut::Buffer(b) => b,
            };
            result = copy_entry(&name, entry.to_tensor(), dst);
        });
        result
    }

    pub fn check_input(&self, images: &Tensor<T>) -> Result<usize> {
        let (n, c, h, w) = images.dims4()?;
        let (eh, ew) = self.config.arch.input_hw;
        if c != 3 || h != eh || w != ew {
            return Err(Error::Shape {
                expected: vec![n, 3, eh, ew],
                actual: images.shape().to_vec(),
            });
        }
        Ok(n)
    }

    fn needed_taps(&self) -> Vec<String> {
        let mut taps = self.config.tap_points.clone();
        taps.push(self.config.final_tap());
        taps
    }

    /// Runs the trunk and returns the tapped scion maps; in train mode with
    /// the branch present, also the pooled accompanying feature.
    pub fn forward_taps(&mut self, images: &Tensor<T>, mode: Mode) -> Result<TapSet<T>> {
        self.check_input(images)?;
        let mut x = images.clone();
        for unit in &mut self.rootstock {
            x = unit.forward(x, mode)?;
        }
        let mut taps = TapSet::default();
        if mode == Mode::Train {
            if let Some(acc) = self.accompanying.as_mut() {
                let mut a = x.clone();
                for unit in &mut acc.units {
                    a = unit.forward(a, mode)?;
                }
                acc.pooled_shape = Some(a.shape().to_vec());
                taps.accompanying = Some(global_avg_pool(&a)?);
            }
        }
        let wanted = self.needed_taps();
        for unit in &mut self.scion {
            x = unit.forward(x, mode)?;
            if wanted.contains(&unit.name) {
                taps.maps.insert(unit.name.clone(), x.clone());
            }
        }
        Ok(taps)
    }

    /// Back-propagates tap gradients (and the accompanying feature gradient)
    /// through the scion, branch and rootstock, accumulating parameter grads.
    pub fn backward_taps(
        &mut self,
        mut tap_grads: BTreeMap<String, Tensor<T>>,
        accompanying_grad: Option<Tensor<T>>,
    ) -> Result<()> {
        let mut g: Option<Tensor<T>> = None;
        for unit in self.scion.iter_mut().rev() {
            if let Some(tg) = tap_grads.remove(&unit.name) {
                g = Some(match g {
                    Some(mut acc) => {
                        acc.add_assign(&tg)?;
                        acc
                    }
                    None => tg,
                });
            }
            if let Some(up) = g.take() {
                g = unit.backward(&up)?;
            }
        }
        if let Some(name) = tap_grads.keys().next() {
            return Err(Error::Invalid(format!("gradient for unknown tap `{name}`")));
        }
        if let Some(ga) = accompanying_grad {
            let acc = self
                .accompanying
                .as_mut()
                .ok_or_else(|| Error::Invalid("accompanying gradient without the branch".into()))?;
            let shape = acc
                .pooled_shape
                .take()
                .ok_or_else(|| Error::Invalid("accompanying backward without forward".into()))?;
            let mut ga = global_avg_pool_backward(&ga, &shape)?;
            for unit in acc.units.iter_mut().rev() {
                ga = unit.backward(&ga)?.expect("bottleneck input grad");
            }
            g = Some(match g {
                Some(mut acc) => {
                    acc.add_assign(&ga)?;
                    acc
                }
                None => ga,
            });
        }
        let mut g = g.ok_or_else(|| Error::Invalid("no gradient reached the rootstock".into()))?;
        let n = self.rootstock.len();
        for (i, unit) in self.rootstock.iter_mut().enumerate().rev() {
            match unit.backward(&g)? {
                Some(next) => g = next,
                None if i == 0 => break,
                None => return Err(Error::Invalid(format!("unit {} dropped its gradient", n - i))),
            }
        }
        Ok(())
    }

    /// One forward/backward pass over a batch; gradients accumulate into the
    /// parameters, no update is applied.
    pub fn train_batch(&mut self, images: &Tensor<T>, labels: &BatchLabels, terms: LossTerms) -> Result<BatchLoss> {
        let n = self.check_input(images)?;
        if labels.labels.len() != n {
            return Err(Error::Dim {
                axis: "labels",
                expected: n,
                actual: labels.labels.len(),
            });
        }
        if labels.num_classes != self.config.num_classes {
            return Err(Error::Dim {
                axis: "classes",
                expected: self.config.num_classes,
                actual: labels.num_classes,
            });
        }
        if self.heads.classifiers.is_empty() {
            return Err(Error::Invalid("model was stripped for inference; cannot train".into()));
        }
        let taps = self.forward_taps(images, Mode::Train)?;
        let outputs = self.heads.compute(&taps, Mode::Train)?;
        let mut joint = joint_loss(&outputs, labels)?;
        if !terms.joint {
            joint.logit_grads.iter_mut().for_each(|g| g.fill(T::zero()));
        }
        let mut acc_loss = None;
        let mut acc_grad = None;
        if let (Some(acc), Some(feature)) = (self.accompanying.as_mut(), taps.accompanying.as_ref()) {
            let clf = acc.classifier.as_mut().expect("objective present");
            let (loss, g) = accompanying_loss(feature, clf, labels, Mode::Train)?;
            acc_loss = Some(loss);
            let mut g = g.expect("train mode gradient");
            if !terms.accompanying {
                g.fill(T::zero());
            }
            acc_grad = Some(g);
        }
        let tap_grads = self.heads.backward(&joint.logit_grads, &taps)?;
        self.backward_taps(tap_grads, acc_grad)?;
        Ok(BatchLoss {
            joint: joint.total,
            per_head: joint.per_head,
            accompanying: acc_loss,
        })
    }

    /// Reduced per-head features of a batch, eval mode.
    pub fn head_outputs(&mut self, images: &Tensor<T>) -> Result<Vec<HeadOutput<T>>> {
        let taps = self.forward_taps(images, Mode::Eval)?;
        self.heads.compute(&taps, Mode::Eval)
    }

    /// Concatenated descriptor `N x (heads * reduced_dim)`, eval mode.
    pub fn features(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        concat_feature(&self.head_outputs(images)?)
    }

    /// Drops the accompanying branch and every classifier; what remains is
    /// the inference network.
    pub fn strip_for_inference(mut self) -> Self {
        self.accompanying = None;
        self.heads.classifiers.clear();
        self.config.with_accompanying = false;
        self.config.with_objective = false;
        self
    }
}

fn copy_entry<T: Scalar>(name: &str, src: Result<Tensor<T>>, dst: &mut Tensor<T>) -> Result<()> {
    let src = src.map_err(|e| Error::Archive(format!("`{name}`: {e}")))?;
    if src.shape() != dst.shape() {
        return Err(Error::Archive(format!(
            "`{name}` has shape {:?} in the archive but {:?} in the model",
            src.shape(),
            dst.shape()
        )));
    }
    *dst = src;
    Ok(())
}

impl<T: Scalar> Visit<T> for GraftedNet<T> {
    fn visit<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        self.rootstock.iter().for_each(|u| u.visit("rootstock", f));
        self.scion.iter().for_each(|u| u.visit("scion", f));
        self.heads.visit("", f);
        if let Some(acc) = &self.accompanying {
            acc.units.iter().for_each(|u| u.visit("accompanying", f));
            if let Some(c) = &acc.classifier {
                c.visit(&join("objective", "acc"), f);
            }
        }
    }
    fn visit_mut<'a>(&'a mut self, _prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        self.rootstock.iter_mut().for_each(|u| u.visit_mut("rootstock", f));
        self.scion.iter_mut().for_each(|u| u.visit_mut("scion", f));
        self.heads.visit_mut("", f);
        if let Some(acc) = &mut self.accompanying {
            acc.units.iter_mut().for_each(|u| u.visit_mut("accompanying", f));
            if let Some(c) = &mut acc.classifier {
                c.visit_mut(&join("objective", "acc"), f);
            }
        }
    }
}
