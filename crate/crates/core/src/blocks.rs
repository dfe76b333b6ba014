//! ResNet bottleneck blocks, skip-connected fire blocks, the stem, and the
//! stage layouts of the rootstock, scion and accompanying branch.

use crate::error::{Error, Result};
use crate::layers::{
    concat_channels, join, split_channels, Activation, ConvBn, MaxPool2d, Mode, Slot, SlotMut, Visit,
};
use crate::ops::conv::ConvGeometry;
use crate::optim::LrGroup;
use crate::tensor::{Scalar, Tensor};

/// Channel widths and block counts of every stage, plus the input size the
/// layout is designed for.
///
/// [`Arch::standard`] is the full-size network; [`Arch::tiny`] keeps the exact
/// topology (projection and identity shortcuts, skip and non-skip fire
/// blocks, every pool) at a width small enough for `f64` gradient checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub input_hw: (usize, usize),
    pub stem_channels: usize,
    /// `(mid channels, blocks)`; output is `4 * mid`.
    pub res2: (usize, usize),
    pub res3: (usize, usize),
    /// `(squeeze planes, expand planes per branch, blocks)`.
    pub fire4: (usize, usize, usize),
    pub fire5: (usize, usize, usize),
    pub res4: (usize, usize),
    pub res5: (usize, usize),
}

impl Arch {
    pub fn standard() -> Self {
        Arch {
            input_hw: (384, 192),
            stem_channels: 64,
            res2: (64, 3),
            res3: (128, 4),
            fire4: (64, 256, 6),
            fire5: (128, 384, 3),
            res4: (256, 6),
            res5: (512, 3),
        }
    }

    pub fn tiny() -> Self {
        Arch {
            input_hw: (192, 64),
            stem_channels: 4,
            res2: (4, 2),
            res3: (8, 2),
            fire4: (4, 16, 2),
            fire5: (8, 24, 3),
            res4: (16, 1),
            res5: (32, 1),
        }
    }

    /// Full topology and block counts at a quarter of the channel width and
    /// half the input resolution: sized for CPU toy training.
    pub fn desk() -> Self {
        Arch {
            input_hw: (192, 96),
            stem_channels: 16,
            res2: (16, 3),
            res3: (32, 4),
            fire4: (16, 64, 6),
            fire5: (32, 96, 3),
            res4: (64, 6),
            res5: (128, 3),
        }
    }

    pub fn rootstock_channels(&self) -> usize {
        4 * self.res3.0
    }

    pub fn fire4_channels(&self) -> usize {
        2 * self.fire4.1
    }

    pub fn fire5_channels(&self) -> usize {
        2 * self.fire5.1
    }

    pub fn accompanying_channels(&self) -> usize {
        4 * self.res5.0
    }

    /// Spatial size of the rootstock output (the stem and `res_conv3x` halve twice and once).
    pub fn rootstock_hw(&self) -> (usize, usize) {
        let (h, w) = self.input_hw;
        (h / 8, w / 8)
    }

    /// Spatial size of the `fire_conv5x` maps.
    pub fn final_hw(&self) -> (usize, usize) {
        let (h, w) = self.input_hw;
        (h / 32, w / 32)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} must be a multiple of 32 in both axes"
            )));
        }
        if self.fire4_channels() != self.rootstock_channels() {
            return Err(Error::Config(format!(
                "fire_conv4x width {} must equal rootstock width {} for its skip connections",
                self.fire4_channels(),
                self.rootstock_channels()
            )));
        }
        if self.fire5.2 != 3 {
            return Err(Error::Config("fire_conv5x needs exactly 3 blocks (taps 5a, 5b, 5c)".into()));
        }
        let counts = [self.res2.1, self.res3.1, self.fire4.2, self.res4.1, self.res5.1];
        if counts.contains(&0) || self.stem_channels == 0 {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BottleneckSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub has_projection: bool,
}

impl BottleneckSpec {
    pub fn new(in_channels: usize, mid_channels: usize, stride: usize) -> Self {
        let out_channels = 4 * mid_channels;
        BottleneckSpec {
            in_channels,
            mid_channels,
            out_channels,
            stride,
            has_projection: stride != 1 || in_channels != out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels != 4 * self.mid_channels {
            return Err(Error::Invalid("bottleneck output must be 4x its mid width".into()));
        }
        let needs = self.stride != 1 || self.in_channels != self.out_channels;
        if needs != self.has_projection {
            return Err(Error::Invalid(
                "bottleneck projection must be present exactly when shape changes".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form learnable scalar count: three conv+BN pairs plus the projection.
    pub fn param_count(&self) -> usize {
        let (i, m, o) = (self.in_channels, self.mid_channels, self.out_channels);
        let proj = if self.has_projection { i * o + 2 * o } else { 0 };
        i * m + 2 * m + 9 * m * m + 2 * m + m * o + 2 * o + proj
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FireSpec {
    pub in_channels: usize,
    pub squeeze_planes: usize,
    pub expand_planes: usize,
    pub skip: bool,
}

impl FireSpec {
    /// Skip connection whenever input and output widths agree.
    pub fn new(in_channels: usize, squeeze_planes: usize, expand_planes: usize) -> Self {
        FireSpec {
            in_channels,
            squeeze_planes,
            expand_planes,
            skip: in_channels == 2 * expand_planes,
        }
    }

    pub fn out_channels(&self) -> usize {
        2 * self.expand_planes
    }

    pub fn validate(&self) -> Result<()> {
        if self.skip && self.in_channels != self.out_channels() {
            return Err(Error::Invalid(format!(
                "fire skip needs equal widths, got {} -> {}",
                self.in_channels,
                self.out_channels()
            )));
        }
        Ok(())
    }

    /// squeeze 1x1 + BN, expand 1x1 and 3x3, BN over the concatenation.
    pub fn param_count(&self) -> usize {
        let (i, s, e) = (self.in_channels, self.squeeze_planes, self.expand_planes);
        i * s + 2 * s + s * e + 9 * s * e + 2 * (2 * e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StemSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

impl StemSpec {
    /// 7x7 conv + BN (the trailing pool has no parameters).
    pub fn param_count(&self) -> usize {
        49 * self.in_channels * self.out_channels + 2 * self.out_channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSpec {
    Stem(StemSpec),
    Bottleneck(BottleneckSpec),
    Fire(FireSpec),
}

impl BlockSpec {
    pub fn in_channels(&self) -> usize {
        match self {
            BlockSpec::Stem(s) => s.in_channels,
            BlockSpec::Bottleneck(b) => b.in_channels,
            BlockSpec::Fire(f) => f.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BlockSpec::Stem(s) => s.out_channels,
            BlockSpec::Bottleneck(b) => b.out_channels,
            BlockSpec::Fire(f) => f.out_channels(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            BlockSpec::Stem(s) => s.param_count(),
            BlockSpec::Bottleneck(b) => b.param_count(),
            BlockSpec::Fire(f) => f.param_count(),
        }
    }
}

/// One named block, optionally followed by a 3x3/2 max pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSpec {
    pub name: String,
    pub block: BlockSpec,
    pub trailing_pool: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub name: String,
    pub units: Vec<UnitSpec>,
}

impl StageSpec {
    pub fn param_count(&self) -> usize {
        self.units.iter().map(|u| u.block.param_count()).sum()
    }
}

/// Consecutive units must agree on channel counts.
pub fn check_chain(stages: &[StageSpec], in_channels: usize) -> Result<usize> {
    let mut c = in_channels;
    for unit in stages.iter().flat_map(|s| &s.units) {
        if unit.block.in_channels() != c {
            return Err(Error::Dim {
                axis: "block input channels",
                expected: c,
                actual: unit.block.in_channels(),
            });
        }
        c = unit.block.out_channels();
    }
    Ok(c)
}

fn letter(i: usize) -> char {
    (b'a' + i as u8) as char
}

fn res_stage(index: usize, in_c: usize, mid: usize, blocks: usize, stride: usize) -> StageSpec {
    let units = (0..blocks)
        .map(|i| {
            let cin = if i == 0 { in_c } else { 4 * mid };
            UnitSpec {
                name: format!("res_conv{index}{}", letter(i)),
                block: BlockSpec::Bottleneck(BottleneckSpec::new(cin, mid, if i == 0 { stride } else { 1 })),
                trailing_pool: false,
            }
        })
        .collect();
    StageSpec {
        name: format!("res_conv{index}x"),
        units,
    }
}

fn fire_stage(index: usize, in_c: usize, squeeze: usize, expand: usize, blocks: usize) -> StageSpec {
    let units = (0..blocks)
        .map(|i| {
            let cin = if i == 0 { in_c } else { 2 * expand };
            UnitSpec {
                name: format!("fire_conv{index}{}", letter(i)),
                block: BlockSpec::Fire(FireSpec::new(cin, squeeze, expand)),
                trailing_pool: i == 0,
            }
        })
        .collect();
    StageSpec {
        name: format!("fire_conv{index}x"),
        units,
    }
}

/// Stem (7x7/2 conv, BN, ReLU, 3x3/2 pool), `res_conv2x` and `res_conv3x`.
pub fn make_rootstock(arch: &Arch) -> Vec<StageSpec> {
    let stem = StageSpec {
        name: "res_conv1".into(),
        units: vec![UnitSpec {
            name: "res_conv1".into(),
            block: BlockSpec::Stem(StemSpec {
                in_channels: 3,
                out_channels: arch.stem_channels,
            }),
            trailing_pool: true,
        }],
    };
    let (m2, b2) = arch.res2;
    let (m3, b3) = arch.res3;
    vec![
        stem,
        res_stage(2, arch.stem_channels, m2, b2, 1),
        res_stage(3, 4 * m2, m3, b3, 2),
    ]
}

/// `fire_conv4x` and `fire_conv5x`, each with a pool after its first block.
pub fn make_scion(arch: &Arch) -> Vec<StageSpec> {
    let (s4, e4, b4) = arch.fire4;
    let (s5, e5, b5) = arch.fire5;
    vec![
        fire_stage(4, arch.rootstock_channels(), s4, e4, b4),
        fire_stage(5, 2 * e4, s5, e5, b5),
    ]
}

/// `res_conv4x` and `res_conv5x`, the training-only branch.
pub fn make_accompanying(arch: &Arch) -> Vec<StageSpec> {
    let (m4, b4) = arch.res4;
    let (m5, b5) = arch.res5;
    vec![
        res_stage(4, arch.rootstock_channels(), m4, b4, 2),
        res_stage(5, 4 * m4, m5, b5, 2),
    ]
}

#[derive(Debug, Clone)]
pub struct Stem<T> {
    pub conv_bn: ConvBn<T>,
    act: Activation,
}

impl<T: Scalar> Stem<T> {
    fn new(spec: StemSpec, group: LrGroup) -> Self {
        let mut conv_bn = ConvBn::new(
            spec.in_channels,
            spec.out_channels,
            7,
            ConvGeometry::new(2, 3, 1),
            group,
        );
        conv_bn.conv.skip_input_grad = true;
        Stem {
            conv_bn,
            act: Activation::relu(),
        }
    }

    fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv_bn.forward(x, mode)?;
        Ok(self.act.forward(y, mode))
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let g = self.act.backward(g)?;
        self.conv_bn.backward(&g)
    }
}

#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    pub spec: BottleneckSpec,
    pub reduce: ConvBn<T>,
    pub spatial: ConvBn<T>,
    pub expand: ConvBn<T>,
    pub projection: Option<ConvBn<T>>,
    acts: [Activation; 3],
}

impl<T: Scalar> Bottleneck<T> {
    pub fn new(spec: BottleneckSpec, group: LrGroup) -> Result<Self> {
        spec.validate()?;
        let (i, m, o) = (spec.in_channels, spec.mid_channels, spec.out_channels);
        Ok(Bottleneck {
            spec,
            reduce: ConvBn::new(i, m, 1, ConvGeometry::default(), group),
            spatial: ConvBn::new(m, m, 3, ConvGeometry::new(spec.stride, 1, 1), group),
            expand: ConvBn::new(m, o, 1, ConvGeometry::default(), group),
            projection: spec
                .has_projection
                .then(|| ConvBn::new(i, o, 1, ConvGeometry::new(spec.stride, 0, 1), group)),
            acts: [Activation::relu(), Activation::relu(), Activation::relu()],
        })
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Dim {
                axis: "bottleneck input channels",
                expected: self.spec.in_channels,
                actual: c,
            });
        }
        let shortcut = match self.projection.as_mut() {
            Some(p) => p.forward(x.clone(), mode)?,
            None => x.clone(),
        };
        let [a1, a2, a3] = &mut self.acts;
        let y = a1.forward(self.reduce.forward(x, mode)?, mode);
        let y = a2.forward(self.spatial.forward(y, mode)?, mode);
        let mut y = self.expand.forward(y, mode)?;
        y.add_assign(&shortcut)?;
        Ok(a3.forward(y, mode))
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let [a1, a2, a3] = &mut self.acts;
        let g = a3.backward(g)?;
        let mut gx = match self.projection.as_mut() {
            Some(p) => p.backward(&g)?.expect("projection input grad"),
            None => g.clone(),
        };
        let gm = self.expand.backward(&g)?.expect("input grad");
        let gm = self.spatial.backward(&a2.backward(&gm)?)?.expect("input grad");
        let gm = self.reduce.backward(&a1.backward(&gm)?)?.expect("input grad");
        gx.add_assign(&gm)?;
        Ok(gx)
    }
}

impl<T: Scalar> Visit<T> for Bottleneck<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        self.reduce.visit_as(&join(prefix, "conv1"), &join(prefix, "bn1"), f);
        self.spatial.visit_as(&join(prefix, "conv2"), &join(prefix, "bn2"), f);
        self.expand.visit_as(&join(prefix, "conv3"), &join(prefix, "bn3"), f);
        if let Some(p) = &self.projection {
            p.visit_as(&join(prefix, "downsample.0"), &join(prefix, "downsample.1"), f);
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        self.reduce.visit_mut_as(&join(prefix, "conv1"), &join(prefix, "bn1"), f);
        self.spatial.visit_mut_as(&join(prefix, "conv2"), &join(prefix, "bn2"), f);
        self.expand.visit_mut_as(&join(prefix, "conv3"), &join(prefix, "bn3"), f);
        if let Some(p) = &mut self.projection {
            p.visit_mut_as(&join(prefix, "downsample.0"), &join(prefix, "downsample.1"), f);
        }
    }
}

/// Squeeze 1x1 conv, BN, ReLU; parallel 1x1 and 3x3 expands; BN over the
/// concatenation; identity skip when widths match; ReLU.
#[derive(Debug, Clone)]
pub struct Fire<T> {
    pub spec: FireSpec,
    pub squeeze: ConvBn<T>,
    pub expand1x1: crate::layers::Conv2d<T>,
    pub expand3x3: crate::layers::Conv2d<T>,
    pub expand_bn: crate::layers::BatchNorm2d<T>,
    squeeze_act: Activation,
    out_act: Activation,
}

impl<T: Scalar> Fire<T> {
    pub fn new(spec: FireSpec, group: LrGroup) -> Result<Self> {
        spec.validate()?;
        let (i, s, e) = (spec.in_channels, spec.squeeze_planes, spec.expand_planes);
        Ok(Fire {
            spec,
            squeeze: ConvBn::new(i, s, 1, ConvGeometry::default(), group),
            expand1x1: crate::layers::Conv2d::new(s, e, 1, ConvGeometry::default(), group),
            expand3x3: crate::layers::Conv2d::new(s, e, 3, ConvGeometry::new(1, 1, 1), group),
            expand_bn: crate::layers::BatchNorm2d::new(2 * e, group),
            squeeze_act: Activation::relu(),
            out_act: Activation::relu(),
        })
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Dim {
                axis: "fire input channels",
                expected: self.spec.in_channels,
                actual: c,
            });
        }
        let skip = self.spec.skip.then(|| x.clone());
        let s = self.squeeze.forward(x, mode)?;
        let s = self.squeeze_act.forward(s, mode);
        let e1 = self.expand1x1.forward(s.clone(), mode)?;
        let e3 = self.expand3x3.forward(s, mode)?;
        let mut y = self.expand_bn.forward(&concat_channels(&e1, &e3)?, mode)?;
        if let Some(x) = skip {
            y.add_assign(&x)?;
        }
        Ok(self.out_act.forward(y, mode))
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.out_act.backward(g)?;
        let gcat = self.expand_bn.backward(&g)?;
        let (g1, g3) = split_channels(&gcat, self.spec.expand_planes)?;
        let mut gs = self.expand1x1.backward(&g1)?.expect("input grad");
        gs.add_assign(&self.expand3x3.backward(&g3)?.expect("input grad"))?;
        let gs = self.squeeze_act.backward(&gs)?;
        let mut gx = self.squeeze.backward(&gs)?.expect("input grad");
        if self.spec.skip {
            gx.add_assign(&g)?;
        }
        Ok(gx)
    }
}

impl<T: Scalar> Visit<T> for Fire<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        self.squeeze.visit_as(&join(prefix, "squeeze"), &join(prefix, "squeeze_bn"), f);
        self.expand1x1.visit(&join(prefix, "expand1x1"), f);
        self.expand3x3.visit(&join(prefix, "expand3x3"), f);
        self.expand_bn.visit(&join(prefix, "expand_bn"), f);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        self.squeeze.visit_mut_as(&join(prefix, "squeeze"), &join(prefix, "squeeze_bn"), f);
        self.expand1x1.visit_mut(&join(prefix, "expand1x1"), f);
        self.expand3x3.visit_mut(&join(prefix, "expand3x3"), f);
        self.expand_bn.visit_mut(&join(prefix, "expand_bn"), f);
    }
}

#[derive(Debug, Clone)]
pub enum Block<T> {
    Stem(Stem<T>),
    Bottleneck(Bottleneck<T>),
    Fire(Fire<T>),
}

/// A built [`UnitSpec`].
#[derive(Debug, Clone)]
pub struct Unit<T> {
    pub name: String,
    pub block: Block<T>,
    pub pool: Option<MaxPool2d>,
}

impl<T: Scalar> Unit<T> {
    pub fn build(spec: &UnitSpec, group: LrGroup) -> Result<Self> {
        let block = match spec.block {
            BlockSpec::Stem(s) => Block::Stem(Stem::new(s, group)),
            BlockSpec::Bottleneck(b) => Block::Bottleneck(Bottleneck::new(b, group)?),
            BlockSpec::Fire(f) => Block::Fire(Fire::new(f, group)?),
        };
        Ok(Unit {
            name: spec.name.clone(),
            block,
            pool: spec.trailing_pool.then(MaxPool2d::halving),
        })
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = match &mut self.block {
            Block::Stem(b) => b.forward(x, mode)?,
            Block::Bottleneck(b) => b.forward(x, mode)?,
            Block::Fire(b) => b.forward(x, mode)?,
        };
        match self.pool.as_mut() {
            Some(p) => p.forward(&y, mode),
            None => Ok(y),
        }
    }

    /// `None` only for the stem, whose input gradient is never formed.
    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        let pooled;
        let g = match self.pool.as_mut() {
            Some(p) => {
                pooled = p.backward(g)?;
                &pooled
            }
            None => g,
        };
        Ok(match &mut self.block {
            Block::Stem(b) => b.backward(g)?,
            Block::Bottleneck(b) => Some(b.backward(g)?),
            Block::Fire(b) => Some(b.backward(g)?),
        })
    }
}

impl<T: Scalar> Visit<T> for Unit<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a, T>)) {
        let p = join(prefix, &self.name);
        match &self.block {
            Block::Stem(s) => s.conv_bn.visit_as(&join(&p, "conv1"), &join(&p, "bn1"), f),
            Block::Bottleneck(b) => b.visit(&p, f),
            Block::Fire(b) => b.visit(&p, f),
        }
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, SlotMut<'a, T>)) {
        let p = join(prefix, &self.name);
        match &mut self.block {
            Block::Stem(s) => s.conv_bn.visit_mut_as(&join(&p, "conv1"), &join(&p, "bn1"), f),
            Block::Bottleneck(b) => b.visit_mut(&p, f),
            Block::Fire(b) => b.visit_mut(&p, f),
        }
    }
}

/// Builds every unit of `stages` in order.
pub fn build_units<T: Scalar>(stages: &[StageSpec], group: LrGroup) -> Result<Vec<Unit<T>>> {
    stages
        .iter()
        .flat_map(|s| &s.units)
        .map(|u| Unit::build(u, group))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Slot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stored_params<T: Scalar, V: Visit<T>>(v: &V) -> usize {
        let mut n = 0;
        v.visit("", &mut |_, s| {
            if let Slot::Param(p) = s {
                n += p.len();
            }
        });
        n
    }

    fn randomize<T: Scalar, V: Visit<T>>(v: &mut V, rng: &mut ChaCha8Rng) {
        v.visit_mut("", &mut |name, s| {
            if let SlotMut::Param(p) = s {
                if name.ends_with("weight") && p.value.rank() == 4 {
                    let scale = (2.0 / (p.len() / p.shape()[0]) as f64).sqrt();
                    p.value.data_mut().iter_mut().for_each(|w| *w = T::of(rng.gen_range(-scale..scale)));
                }
            }
        });
    }

    #[test]
    fn closed_form_counts() {
        assert_eq!(FireSpec::new(512, 64, 256).param_count(), 197_760);
        assert_eq!(FireSpec::new(512, 128, 384).param_count(), 558_848);
        assert_eq!(FireSpec::new(768, 128, 384).param_count(), 591_616);
        // 512 -> (256) -> 1024, projected
        let b = BottleneckSpec::new(512, 256, 2);
        assert!(b.has_projection);
        let hand = 512 * 256 + 512 + 256 * 256 * 9 + 512 + 256 * 1024 + 2048 + 512 * 1024 + 2048;
        assert_eq!(b.param_count(), hand);
        let arch = Arch::standard();
        let scion: usize = make_scion(&arch).iter().map(StageSpec::param_count).sum();
        assert_eq!(scion, 2_928_640);
    }

    #[test]
    fn stage_layouts() {
        let arch = Arch::standard();
        let root = make_rootstock(&arch);
        assert_eq!(check_chain(&root, 3).unwrap(), 512);
        let scion = make_scion(&arch);
        assert_eq!(check_chain(&scion, 512).unwrap(), 768);
        let names: Vec<_> = scion.iter().flat_map(|s| &s.units).map(|u| u.name.as_str()).collect();
        assert_eq!(names.first(), Some(&"fire_conv4a"));
        assert!(names.contains(&"fire_conv4f") && names.contains(&"fire_conv5c"));
        let pools: Vec<_> = scion
            .iter()
            .flat_map(|s| &s.units)
            .filter(|u| u.trailing_pool)
            .map(|u| u.name.as_str())
            .collect();
        assert_eq!(pools, ["fire_conv4a", "fire_conv5a"]);
        let skips: Vec<bool> = scion[1]
            .units
            .iter()
            .map(|u| matches!(u.block, BlockSpec::Fire(f) if f.skip))
            .collect();
        assert_eq!(skips, [false, true, true]);
        assert!(scion[0].units.iter().all(|u| matches!(u.block, BlockSpec::Fire(f) if f.skip)));
        assert_eq!(check_chain(&make_accompanying(&arch), 512).unwrap(), 2048);
        assert!(check_chain(&scion, 256).is_err());
    }

    #[test]
    fn built_blocks_store_closed_form_counts() {
        let arch = Arch::tiny();
        for spec in [make_rootstock(&arch), make_scion(&arch), make_accompanying(&arch)].concat() {
            for unit in &spec.units {
                let built: Unit<f32> = Unit::build(unit, LrGroup::Fresh).unwrap();
                assert_eq!(stored_params(&built), unit.block.param_count(), "{}", unit.name);
            }
        }
    }

    #[test]
    fn bottleneck_residual_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in [BottleneckSpec::new(16, 4, 1), BottleneckSpec::new(8, 4, 2)] {
            let mut b = Bottleneck::<f64>::new(spec, LrGroup::Fresh).unwrap();
            randomize(&mut b, &mut rng);
            b.expand.bn.gamma.value.fill(0.0);
            let x = Tensor::from_fn(&[2, spec.in_channels, 6, 4], |_| rng.gen_range(-1.0..1.0));
            let shortcut = match b.projection.as_mut() {
                Some(p) => p.forward(x.clone(), Mode::Train).unwrap(),
                None => x.clone(),
            };
            let y = b.forward(x, Mode::Train).unwrap();
            assert_eq!(y, crate::ops::activation::relu(&shortcut));
            if spec.stride == 1 {
                assert_eq!(y.shape(), &[2, 16, 6, 4]);
            }
        }
    }

    #[test]
    fn fire_residual_zero_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = FireSpec::new(8, 2, 4);
        assert!(spec.skip);
        let mut f = Fire::<f64>::new(spec, LrGroup::Fresh).unwrap();
        randomize(&mut f, &mut rng);
        f.expand1x1.weight.value.fill(0.0);
        f.expand3x3.weight.value.fill(0.0);
        let x = Tensor::from_fn(&[2, 8, 5, 3], |_| rng.gen_range(-1.0..1.0));
        let y = f.forward(x.clone(), Mode::Train).unwrap();
        assert_eq!(y, crate::ops::activation::relu(&x));

        let mut f = Fire::<f32>::new(FireSpec::new(8, 2, 6), LrGroup::Fresh).unwrap();
        for (h, w) in [(1, 1), (7, 3), (12, 6)] {
            let y = f.forward(Tensor::zeros(&[1, 8, h, w]), Mode::Eval).unwrap();
            assert_eq!(y.shape(), &[1, 12, h, w]);
        }
        let bad = FireSpec {
            skip: true,
            ..FireSpec::new(8, 2, 6)
        };
        assert!(Fire::<f32>::new(bad, LrGroup::Fresh).is_err());
        assert!(f.forward(Tensor::zeros(&[1, 4, 2, 2]), Mode::Eval).is_err());
    }
}
