//! The training loop: augmentation, shuffled mini-batches, joint plus
//! accompanying loss, momentum SGD on two learning-rate groups, and
//! resumable checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::archive::WeightArchive;
use crate::data::{stack_images, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::heads::BatchLabels;
use crate::layers::{Slot, SlotMut, Visit};
use crate::model::{GraftedNet, LossTerms};
use crate::optim::{lr_at_epoch, sgd_step, SgdConfig};
use crate::seed::{derive_seed, rng_for, stream};
use crate::tensor::Tensor;

pub const WEIGHTS_FILE: &str = "weights.gnw";
pub const STATE_FILE: &str = "state.gnw";

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Size every image is resized to before augmentation.
    pub target_hw: (usize, usize),
    /// Reflect padding before the random crop back to `target_hw`.
    pub pad: usize,
    pub hflip_prob: f64,
    pub erase_prob: f64,
    /// Erased fraction of the image area.
    pub erase_area: (f64, f64),
    /// Height / width of the erased rectangle.
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_hw: (384, 192),
            pad: 10,
            hflip_prob: 0.5,
            erase_prob: 0.5,
            erase_area: (0.02, 0.4),
            erase_aspect: (0.3, 3.33),
        }
    }
}

impl AugmentConfig {
    /// Everything off: `augment` is the identity.
    pub fn identity(target_hw: (usize, usize)) -> Self {
        AugmentConfig {
            target_hw,
            pad: 0,
            hflip_prob: 0.0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.target_hw;
        if h == 0 || w == 0 {
            return Err(Error::Config("augment target must be non-empty".into()));
        }
        if self.pad >= h || self.pad >= w {
            return Err(Error::Config(format!("pad {} must be smaller than the image", self.pad)));
        }
        for (name, p) in [("hflip_prob", self.hflip_prob), ("erase_prob", self.erase_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} is not a probability")));
            }
        }
        let (a0, a1) = self.erase_area;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!("erase_area range ({a0}, {a1}) is not within (0, 1]")));
        }
        let (r0, r1) = self.erase_aspect;
        if !(0.0 < r0 && r0 <= r1) {
            return Err(Error::Config(format!("erase_aspect range ({r0}, {r1}) is not ordered and positive")));
        }
        Ok(())
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Pad-and-crop, horizontal flip and random erasing of a `3 x H x W` image
/// with values in `[0, 1]`. Fully determined by `sample_seed`.
pub fn augment(image: &Tensor<f32>, cfg: &AugmentConfig, sample_seed: u64) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let (h, w) = cfg.target_hw;
    image.expect_shape(&[3, h, w])?;
    let mut rng = rng_for(sample_seed, stream::AUGMENT, 0);
    let src = image.data();
    let (oy, ox) = if cfg.pad > 0 {
        (rng.gen_range(0..=2 * cfg.pad), rng.gen_range(0..=2 * cfg.pad))
    } else {
        (0, 0)
    };
    let flip = rng.gen_bool(cfg.hflip_prob);
    let pad = cfg.pad as isize;
    let mut out = Tensor::from_fn(&[3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let x = if flip { w - 1 - x } else { x };
        let sy = reflect(y as isize + oy as isize - pad, h);
        let sx = reflect(x as isize + ox as isize - pad, w);
        src[c * h * w + sy * w + sx]
    });
    if rng.gen_bool(cfg.erase_prob) {
        let area = (h * w) as f64;
        for _ in 0..100 {
            let target = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1) * area;
            let aspect = rng.gen_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
            let eh = (target * aspect).sqrt().round() as usize;
            let ew = (target / aspect).sqrt().round() as usize;
            if eh == 0 || ew == 0 || eh >= h || ew >= w {
                continue;
            }
            let y0 = rng.gen_range(0..=h - eh);
            let x0 = rng.gen_range(0..=w - ew);
            let d = out.data_mut();
            for c in 0..3 {
                for y in y0..y0 + eh {
                    for x in x0..x0 + ew {
                        d[c * h * w + y * w + x] = rng.gen::<f32>();
                    }
                }
            }
            break;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub augment: AugmentConfig,
    pub norm: Normalization,
    /// Images per forward/backward pass; gradients of the micro-batches of
    /// one batch are summed before the update. `0` means the whole batch.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            augment: AugmentConfig::default(),
            norm: Normalization::default(),
            micro_batch: 0,
        }
    }
}

impl TrainConfig {
    /// Recipe for the reduced network on the synthetic toy set, trained from
    /// scratch: a smaller batch, learning rates scaled down for it (the loss
    /// is summed over the batch), no step decay within 30 epochs, and crop
    /// and flip without random erasing.
    pub fn desk() -> Self {
        let standard = SgdConfig::default();
        TrainConfig {
            sgd: SgdConfig {
                base_lr_pretrained: standard.base_lr_pretrained / 16.0,
                base_lr_fresh: standard.base_lr_fresh / 16.0,
                decay_epochs: Vec::new(),
                total_epochs: 30,
                batch_size: 8,
                ..standard
            },
            augment: AugmentConfig {
                target_hw: crate::blocks::Arch::desk().input_hw,
                erase_prob: 0.0,
                ..AugmentConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.augment.validate()?;
        self.norm.validate()?;
        if self.micro_batch == 1 {
            return Err(Error::Config("micro_batch must be 0 or at least 2 (batch norm)".into()));
        }
        Ok(())
    }
}

/// Summed losses of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub images: usize,
    pub lr: (f64, f64),
    pub joint: f64,
    pub per_head: Vec<f64>,
    pub accompanying: Option<f64>,
    /// Total loss of every optimizer step, in order.
    pub batch_losses: Vec<f64>,
}

impl EpochStats {
    pub fn mean_joint(&self) -> f64 {
        self.joint / self.images as f64
    }

    fn encode(&self) -> Vec<u64> {
        let mut v = vec![self.epoch as u64, self.images as u64, self.lr.0.to_bits(), self.lr.1.to_bits()];
        v.push(self.joint.to_bits());
        v.push(self.accompanying.is_some() as u64);
        v.push(self.accompanying.unwrap_or(0.0).to_bits());
        v.push(self.per_head.len() as u64);
        v.extend(self.per_head.iter().map(|x| x.to_bits()));
        v.extend(self.batch_losses.iter().map(|x| x.to_bits()));
        v
    }

    fn decode(v: &[u64]) -> Result<Self> {
        let bad = || Error::Archive("malformed epoch history entry".into());
        if v.len() < 8 {
            return Err(bad());
        }
        let heads = v[7] as usize;
        let rest = v.get(8..).ok_or_else(bad)?;
        if rest.len() < heads {
            return Err(bad());
        }
        let f = f64::from_bits;
        Ok(EpochStats {
            epoch: v[0] as usize,
            images: v[1] as usize,
            lr: (f(v[2]), f(v[3])),
            joint: f(v[4]),
            accompanying: (v[5] == 1).then(|| f(v[6])),
            per_head: rest[..heads].iter().map(|&x| f(x)).collect(),
            batch_losses: rest[heads..].iter().map(|&x| f(x)).collect(),
        })
    }
}

/// Progress of a run. Together with the weights and the momentum buffers
/// (both in the checkpoint), it determines the rest of the run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    /// Master seed; shuffles and augmentations derive from it per epoch
    /// and per sample.
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            epoch: 0,
            step: 0,
            seed,
            history: Vec::new(),
        }
    }

    /// Sidecar archive: counters, history and every momentum buffer.
    pub fn to_archive(&self, model: &GraftedNet<f32>) -> Result<WeightArchive> {
        let mut a = WeightArchive::new();
        a.insert_u64("state.counters", &[self.epoch as u64, self.step, self.seed])?;
        for (i, h) in self.history.iter().enumerate() {
            a.insert_u64(&format!("state.history.{i:06}"), &h.encode())?;
        }
        let mut result = Ok(());
        model.visit("", &mut |name, slot| {
            if let (Slot::Param(p), true) = (slot, result.is_ok()) {
                result = a.insert_tensor(&format!("momentum.{name}"), &p.momentum);
            }
        });
        result?;
        Ok(a)
    }

    /// Restores the state and loads the momentum buffers into `model`.
    pub fn from_archive(archive: &WeightArchive, model: &mut GraftedNet<f32>) -> Result<Self> {
        let c = archive.u64s("state.counters")?;
        let [epoch, step, seed] = c else {
            return Err(Error::Archive("state.counters must hold 3 values".into()));
        };
        let mut history = Vec::new();
        for (name, _) in archive.iter().filter(|(n, _)| n.starts_with("state.history.")) {
            history.push(EpochStats::decode(archive.u64s(name)?)?);
        }
        let mut expected = 0usize;
        let mut result = Ok(());
        model.visit_mut("", &mut |name, slot| {
            if let (SlotMut::Param(p), true) = (slot, result.is_ok()) {
                expected += 1;
                result = archive.tensor::<f32>(&format!("momentum.{name}")).and_then(|m| {
                    m.expect_shape(p.shape())?;
                    p.momentum = m;
                    Ok(())
                });
            }
        });
        result?;
        let found = archive.names().filter(|n| n.starts_with("momentum.")).count();
        if found != expected {
            return Err(Error::Archive(format!(
                "state holds {found} momentum buffers, model has {expected} parameters"
            )));
        }
        Ok(TrainState {
            epoch: *epoch as usize,
            step: *step,
            seed: *seed,
            history,
        })
    }
}

/// Writes the weights and the state sidecar into `dir`.
pub fn save_checkpoint(dir: &Path, model: &GraftedNet<f32>, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.save_weights()?.write_file(&dir.join(WEIGHTS_FILE))?;
    state.to_archive(model)?.write_file(&dir.join(STATE_FILE))
}

pub fn load_checkpoint(dir: &Path, model: &mut GraftedNet<f32>) -> Result<TrainState> {
    model.load_weights(&WeightArchive::read_file(&dir.join(WEIGHTS_FILE))?)?;
    TrainState::from_archive(&WeightArchive::read_file(&dir.join(STATE_FILE))?, model)
}

/// Splits `0..n` into consecutive chunks of `size`; a trailing chunk of a
/// single item joins the previous one, since batch norm needs two samples.
pub fn chunk_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let size = size.max(1);
    let mut out: Vec<(usize, usize)> = (0..n).step_by(size).map(|s| (s, (s + size).min(n))).collect();
    if out.len() >= 2 && out.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, e) = out.pop().expect("len >= 2");
        out.last_mut().expect("len >= 1").1 = e;
    }
    out
}

/// One pass over the training split: shuffle, then per mini-batch forward,
/// loss, backward and one SGD step at the epoch's learning rates.
pub fn train_epoch(
    model: &mut GraftedNet<f32>,
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<EpochStats> {
    cfg.validate()?;
    let (labels, _) = data.train_labels()?;
    if labels.len() < 2 {
        return Err(Error::Data(format!(
            "training needs at least 2 images, the split has {}",
            labels.len()
        )));
    }
    let classes = model.config.num_classes;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    if cfg.augment.target_hw != model.config.arch.input_hw {
        return Err(Error::Config(format!(
            "augment target {:?} differs from the model input {:?}",
            cfg.augment.target_hw, model.config.arch.input_hw
        )));
    }
    let (lr_pre, lr_fresh) = lr_at_epoch(state.epoch, &cfg.sgd)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng_for(state.seed, stream::SHUFFLE, state.epoch as u64));

    let heads = model.heads.len();
    let mut stats = EpochStats {
        epoch: state.epoch,
        images: 0,
        lr: (lr_pre, lr_fresh),
        joint: 0.0,
        per_head: vec![0.0; heads],
        accompanying: model.accompanying.is_some().then_some(0.0),
        batch_losses: Vec::new(),
    };
    model.zero_grads();
    let epoch_key = (state.epoch as u64) << 32;
    for (b0, b1) in chunk_bounds(order.len(), cfg.sgd.batch_size) {
        let batch = &order[b0..b1];
        let micro = if cfg.micro_batch == 0 { batch.len() } else { cfg.micro_batch };
        let mut batch_total = 0.0;
        for (m0, m1) in chunk_bounds(batch.len(), micro) {
            let mut imgs = Vec::with_capacity(m1 - m0);
            for (pos, &i) in batch[m0..m1].iter().enumerate() {
                let raw = data.train[i].load(cfg.augment.target_hw)?;
                let sample_seed = derive_seed(state.seed, stream::AUGMENT, epoch_key | (b0 + m0 + pos) as u64);
                let mut img = augment(&raw, &cfg.augment, sample_seed)?;
                cfg.norm.apply(&mut img)?;
                imgs.push(img);
            }
            let y = BatchLabels::new(batch[m0..m1].iter().map(|&i| labels[i]).collect(), classes)?;
            let loss = model.train_batch(&stack_images(imgs)?, &y, LossTerms::ALL)?;
            if !loss.total().is_finite() {
                return Err(Error::Invalid(format!(
                    "loss became non-finite at epoch {} step {}",
                    state.epoch, state.step
                )));
            }
            stats.joint += loss.joint;
            for (acc, l) in stats.per_head.iter_mut().zip(&loss.per_head) {
                *acc += l;
            }
            if let (Some(acc), Some(l)) = (stats.accompanying.as_mut(), loss.accompanying) {
                *acc += l;
            }
            batch_total += loss.total();
            stats.images += m1 - m0;
        }
        sgd_step(model.parameters_mut(), lr_pre, lr_fresh, &cfg.sgd);
        state.step += 1;
        stats.batch_losses.push(batch_total);
    }
    state.epoch += 1;
    state.history.push(stats.clone());
    Ok(stats)
}

/// Early-stopping target checked on the query/gallery split.
#[derive(Debug, Clone, PartialEq)]
pub struct StopRule {
    /// Evaluate after every `eval_every` epochs (and after the last one).
    pub eval_every: usize,
    pub rank1: f64,
    pub map: f64,
}

impl StopRule {
    /// Evaluate every epoch; stop at rank-1 ≥ 0.99 and mAP ≥ 0.95.
    pub fn desk() -> Self {
        StopRule {
            eval_every: 1,
            rank1: 0.99,
            map: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub epochs_run: usize,
    pub report: Option<EvalReport>,
    pub reached: bool,
}

/// Runs epochs until `state.epoch == epochs` or the stop rule is met.
/// `on_epoch` sees the model and state after every epoch (the epoch's
/// stats are the last history entry) and may abort the run.
pub fn fit(
    model: &mut GraftedNet<f32>,
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    stop: Option<&StopRule>,
    mut on_epoch: impl FnMut(&GraftedNet<f32>, &TrainState, Option<&EvalReport>) -> Result<()>,
) -> Result<FitOutcome> {
    let start = state.epoch;
    let mut report = None;
    while state.epoch < epochs {
        train_epoch(model, state, data, cfg)?;
        let due = stop.is_some_and(|s| state.epoch % s.eval_every.max(1) == 0 || state.epoch == epochs);
        if due {
            report = Some(evaluate(model, &data.query, &data.gallery, &cfg.norm)?);
        }
        on_epoch(model, state, if due { report.as_ref() } else { None })?;
        if let (Some(s), Some(r)) = (stop, report.as_ref()) {
            if due && r.rank1() >= s.rank1 && r.map >= s.map {
                return Ok(FitOutcome {
                    epochs_run: state.epoch - start,
                    report,
                    reached: true,
                });
            }
        }
    }
    Ok(FitOutcome {
        epochs_run: state.epoch - start,
        report,
        reached: false,
    })
}
