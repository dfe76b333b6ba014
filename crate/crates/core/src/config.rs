//! Run configuration: a flat `key = value` text format with dotted
//! sections. Every key has a default; unknown keys are rejected.
//!
//! A `preset` line (standard or desk) selects the starting defaults and the
//! remaining lines override them in order. [`RunConfig::to_text`] writes
//! every key, so `parse(to_text(c)) == c`.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::blocks::Arch;
use crate::data::{ingest_market_layout, ingest_split_file, synth_dataset, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{Ablation, GraftedNetConfig};
use crate::optim::SgdConfig;
use crate::train::{AugmentConfig, StopRule, TrainConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "GNET_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The full-size network with the full 80-epoch schedule.
    Standard,
    /// Reduced width and resolution on the synthetic toy set, CPU-sized.
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Standard => "standard",
            Preset::Desk => "desk",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Preset::Standard),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}` (standard, desk)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchName {
    Standard,
    Desk,
    Tiny,
}

impl ArchName {
    pub fn arch(self) -> Arch {
        match self {
            ArchName::Standard => Arch::standard(),
            ArchName::Desk => Arch::desk(),
            ArchName::Tiny => Arch::tiny(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ArchName::Standard => "standard",
            ArchName::Desk => "desk",
            ArchName::Tiny => "tiny",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ArchName::Standard),
            "desk" => Ok(ArchName::Desk),
            "tiny" => Ok(ArchName::Tiny),
            _ => Err(Error::Config(format!("unknown arch `{s}` (standard, desk, tiny)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSpec {
    /// `bounding_box_train` / `query` / `bounding_box_test` under `root`.
    Market { root: PathBuf },
    /// Images under `root` assigned to splits by a `<role> <path>` file.
    Split { root: PathBuf, file: PathBuf },
    Synth { ids: usize, per_id: usize, cameras: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: ArchName,
    /// `0` takes the class count from the training split.
    pub classes: usize,
    pub reduction_groups: usize,
    pub reduced_dim: usize,
    pub ablation: Ablation,
    /// Archive with rootstock/accompanying weights; empty for none.
    pub pretrained: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// `None` trains for the full schedule without evaluating.
    pub stop: Option<StopRule>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Standard => RunConfig {
                preset,
                seed: 0,
                output_dir: PathBuf::from("run"),
                dataset: DatasetSpec::Market {
                    root: PathBuf::from("Market-1501"),
                },
                model: ModelSpec {
                    arch: ArchName::Standard,
                    classes: 0,
                    reduction_groups: 8,
                    reduced_dim: 256,
                    ablation: Ablation::Full,
                    pretrained: None,
                },
                train: TrainConfig::default(),
                stop: None,
            },
            Preset::Desk => {
                let model = GraftedNetConfig::desk(2);
                RunConfig {
                    preset,
                    seed: 0,
                    output_dir: PathBuf::from("run"),
                    dataset: DatasetSpec::Synth {
                        ids: 16,
                        per_id: 8,
                        cameras: 4,
                    },
                    model: ModelSpec {
                        arch: ArchName::Desk,
                        classes: 0,
                        reduction_groups: model.reduction_groups,
                        reduced_dim: model.reduced_dim,
                        ablation: Ablation::Full,
                        pretrained: None,
                    },
                    train: TrainConfig::desk(),
                    stop: Some(StopRule::desk()),
                }
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", no + 1)))?;
            entries.push((no + 1, key.trim().to_string(), value.trim().to_string()));
        }
        let preset = match entries.iter().filter(|(_, k, _)| k == "preset").last() {
            Some((_, _, v)) => Preset::parse(v)?,
            None => Preset::Standard,
        };
        let mut cfg = RunConfig::preset(preset);
        for (no, key, value) in &entries {
            if key != "preset" {
                cfg.set(key, value).map_err(|e| Error::Config(format!("line {no}: {}", strip(e))))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let sgd = &mut self.train.sgd;
        let aug = &mut self.train.augment;
        match key {
            "seed" => self.seed = num(key, value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "dataset.kind" => {
                self.dataset = match value {
                    "market" => DatasetSpec::Market {
                        root: PathBuf::from("Market-1501"),
                    },
                    "split" => DatasetSpec::Split {
                        root: PathBuf::from("."),
                        file: PathBuf::from("split.txt"),
                    },
                    "synth" => DatasetSpec::Synth {
                        ids: 16,
                        per_id: 8,
                        cameras: 4,
                    },
                    _ => return Err(Error::Config(format!("dataset.kind `{value}` (market, split, synth)"))),
                }
            }
            "dataset.root" => match &mut self.dataset {
                DatasetSpec::Market { root } | DatasetSpec::Split { root, .. } => *root = PathBuf::from(value),
                _ => return Err(Error::Config("dataset.root needs dataset.kind = market or split".into())),
            },
            "dataset.split_file" => match &mut self.dataset {
                DatasetSpec::Split { file, .. } => *file = PathBuf::from(value),
                _ => return Err(Error::Config("dataset.split_file needs dataset.kind = split".into())),
            },
            "dataset.ids" | "dataset.per_id" | "dataset.cameras" => match &mut self.dataset {
                DatasetSpec::Synth { ids, per_id, cameras } => {
                    let slot = match key {
                        "dataset.ids" => ids,
                        "dataset.per_id" => per_id,
                        _ => cameras,
                    };
                    *slot = num(key, value)?;
                }
                _ => return Err(Error::Config(format!("{key} needs dataset.kind = synth"))),
            },
            "model.arch" => self.model.arch = ArchName::parse(value)?,
            "model.classes" => self.model.classes = num(key, value)?,
            "model.reduction_groups" => self.model.reduction_groups = num(key, value)?,
            "model.reduced_dim" => self.model.reduced_dim = num(key, value)?,
            "model.ablation" => {
                self.model.ablation = Ablation::ALL
                    .into_iter()
                    .find(|a| a.label() == value)
                    .ok_or_else(|| Error::Config(format!("model.ablation `{value}` (full, -AL, -PF, -MF, -MF-PF)")))?
            }
            "model.pretrained" => self.model.pretrained = (!value.is_empty()).then(|| PathBuf::from(value)),
            "sgd.lr_pretrained" => sgd.base_lr_pretrained = num(key, value)?,
            "sgd.lr_fresh" => sgd.base_lr_fresh = num(key, value)?,
            "sgd.momentum" => sgd.momentum = num(key, value)?,
            "sgd.weight_decay" => sgd.weight_decay = num(key, value)?,
            "sgd.decay_epochs" => sgd.decay_epochs = list(key, value)?,
            "sgd.decay_factor" => sgd.decay_factor = num(key, value)?,
            "sgd.epochs" => sgd.total_epochs = num(key, value)?,
            "sgd.batch_size" => sgd.batch_size = num(key, value)?,
            "augment.height" => aug.target_hw.0 = num(key, value)?,
            "augment.width" => aug.target_hw.1 = num(key, value)?,
            "augment.pad" => aug.pad = num(key, value)?,
            "augment.hflip_prob" => aug.hflip_prob = num(key, value)?,
            "augment.erase_prob" => aug.erase_prob = num(key, value)?,
            "augment.erase_area" => aug.erase_area = pair(key, value)?,
            "augment.erase_aspect" => aug.erase_aspect = pair(key, value)?,
            "norm.mean" => self.train.norm.mean = triple(key, value)?,
            "norm.std" => self.train.norm.std = triple(key, value)?,
            "train.micro_batch" => self.train.micro_batch = num(key, value)?,
            "train.eval_every" => {
                let every: usize = num(key, value)?;
                self.stop = match (every, self.stop.take()) {
                    (0, _) => None,
                    (e, Some(s)) => Some(StopRule { eval_every: e, ..s }),
                    (e, None) => Some(StopRule {
                        eval_every: e,
                        rank1: 1.0,
                        map: 1.0,
                    }),
                }
            }
            "train.stop_rank1" | "train.stop_map" => {
                let v: f64 = num(key, value)?;
                let stop = self
                    .stop
                    .as_mut()
                    .ok_or_else(|| Error::Config(format!("{key} needs train.eval_every > 0 first")))?;
                if key == "train.stop_rank1" {
                    stop.rank1 = v;
                } else {
                    stop.map = v;
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key in canonical order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", self.preset.name().into());
        kv("seed", self.seed.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        match &self.dataset {
            DatasetSpec::Market { root } => {
                kv("dataset.kind", "market".into());
                kv("dataset.root", root.display().to_string());
            }
            DatasetSpec::Split { root, file } => {
                kv("dataset.kind", "split".into());
                kv("dataset.root", root.display().to_string());
                kv("dataset.split_file", file.display().to_string());
            }
            DatasetSpec::Synth { ids, per_id, cameras } => {
                kv("dataset.kind", "synth".into());
                kv("dataset.ids", ids.to_string());
                kv("dataset.per_id", per_id.to_string());
                kv("dataset.cameras", cameras.to_string());
            }
        }
        let m = &self.model;
        kv("model.arch", m.arch.name().into());
        kv("model.classes", m.classes.to_string());
        kv("model.reduction_groups", m.reduction_groups.to_string());
        kv("model.reduced_dim", m.reduced_dim.to_string());
        kv("model.ablation", m.ablation.label().into());
        kv(
            "model.pretrained",
            m.pretrained.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        let sgd = &self.train.sgd;
        kv("sgd.lr_pretrained", sgd.base_lr_pretrained.to_string());
        kv("sgd.lr_fresh", sgd.base_lr_fresh.to_string());
        kv("sgd.momentum", sgd.momentum.to_string());
        kv("sgd.weight_decay", sgd.weight_decay.to_string());
        kv("sgd.decay_epochs", join(&sgd.decay_epochs));
        kv("sgd.decay_factor", sgd.decay_factor.to_string());
        kv("sgd.epochs", sgd.total_epochs.to_string());
        kv("sgd.batch_size", sgd.batch_size.to_string());
        let aug = &self.train.augment;
        kv("augment.height", aug.target_hw.0.to_string());
        kv("augment.width", aug.target_hw.1.to_string());
        kv("augment.pad", aug.pad.to_string());
        kv("augment.hflip_prob", aug.hflip_prob.to_string());
        kv("augment.erase_prob", aug.erase_prob.to_string());
        kv("augment.erase_area", join(&[aug.erase_area.0, aug.erase_area.1]));
        kv("augment.erase_aspect", join(&[aug.erase_aspect.0, aug.erase_aspect.1]));
        kv("norm.mean", join(&self.train.norm.mean));
        kv("norm.std", join(&self.train.norm.std));
        kv("train.micro_batch", self.train.micro_batch.to_string());
        match &self.stop {
            None => kv("train.eval_every", "0".into()),
            Some(stop) => {
                kv("train.eval_every", stop.eval_every.to_string());
                kv("train.stop_rank1", stop.rank1.to_string());
                kv("train.stop_map", stop.map.to_string());
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let hw = self.model.arch.arch().input_hw;
        if self.train.augment.target_hw != hw {
            return Err(Error::Config(format!(
                "augment size {:?} must match the {} arch input {hw:?}",
                self.train.augment.target_hw,
                self.model.arch.name()
            )));
        }
        if let DatasetSpec::Synth { ids, per_id, cameras } = self.dataset {
            if ids < 2 || per_id < 2 || cameras < 2 {
                return Err(Error::Config("synthetic dataset needs at least 2 ids, images per id and cameras".into()));
            }
        }
        self.model_config(self.model.classes.max(2))?.validate()
    }

    /// Applies the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Network configuration for `classes` identities (used when
    /// `model.classes` is 0).
    pub fn model_config(&self, classes: usize) -> Result<GraftedNetConfig> {
        let m = &self.model;
        let num_classes = if m.classes == 0 { classes } else { m.classes };
        let cfg = GraftedNetConfig {
            reduction_groups: m.reduction_groups,
            reduced_dim: m.reduced_dim,
            ..GraftedNetConfig::with_arch(num_classes, m.arch.arch())
        };
        Ok(m.ablation.apply(cfg))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Market { root } => ingest_market_layout(root),
            DatasetSpec::Split { root, file } => ingest_split_file(root, file),
            DatasetSpec::Synth { ids, per_id, cameras } => synth_dataset(*ids, *per_id, *cameras, self.seed),
        }
    }

    pub fn norm(&self) -> &Normalization {
        &self.train.norm
    }

    pub fn sgd(&self) -> &SgdConfig {
        &self.train.sgd
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.train.augment
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match list::<f64>(key, value)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated numbers"))),
    }
}

fn triple(key: &str, value: &str) -> Result<[f64; 3]> {
    list::<f64>(key, value)?
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated numbers")))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
