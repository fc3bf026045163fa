//! Conditional patch discriminators over a three-level image pyramid.
//!
//! Four independent networks judge `[fundus, angiogram]` channel stacks:
//! `D1_fine` at full resolution, `D2_fine` and `D1_coarse` at half
//! resolution and `D2_coarse` at quarter resolution.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{DEFAULT_SLOPE, INIT_STD};
use crate::error::{config_err, input_err, Result};
use crate::nn::{
    concat_channels, join, split_channels, BatchNorm2d, BatchNormOptions, Conv2d, LeakyRelu, Mode,
    Module, ReflectionPad2d, Sequential, Sigmoid, Slot, Tensor,
};
use crate::resample::{BatchPyramid, PYRAMID_LEVELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub encoder_blocks: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub final_kernel: usize,
    pub activation_slope: f64,
    /// Squash patch scores into (0, 1). Disable for a −1/+1 target coding.
    #[serde(default = "yes")]
    pub sigmoid_output: bool,
    #[serde(default)]
    pub norm: BatchNormOptions,
}

fn yes() -> bool {
    true
}

impl DiscriminatorConfig {
    pub fn new(input_size: usize, base_channels: usize) -> Self {
        DiscriminatorConfig {
            input_size,
            input_channels: 4,
            encoder_blocks: 3,
            base_channels,
            kernel: 4,
            final_kernel: 3,
            activation_slope: DEFAULT_SLOPE,
            sigmoid_output: true,
            norm: BatchNormOptions::default(),
        }
    }

    pub fn patch_output_size(&self) -> usize {
        self.input_size >> self.encoder_blocks
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << self.encoder_blocks) {
            return Err(config_err!(
                "discriminator input {} is not divisible by 2^{}",
                self.input_size,
                self.encoder_blocks
            ));
        }
        if self.kernel != 4 {
            return Err(config_err!(
                "discriminator blocks use kernel 4 (stride 2, padding 1), got {}",
                self.kernel
            ));
        }
        if self.final_kernel.is_multiple_of(2) {
            return Err(config_err!("final kernel must be odd"));
        }
        if self.base_channels == 0 || self.input_channels == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        Ok(())
    }

    /// Receptive field, in pixels of this discriminator's own input.
    pub fn receptive_field(&self) -> usize {
        let mut layers = vec![(self.kernel, 2); self.encoder_blocks];
        layers.push((self.final_kernel, 1));
        let (mut rf, mut jump) = (1, 1);
        for (k, s) in layers {
            rf += (k - 1) * jump;
            jump *= s;
        }
        rf
    }
}

pub struct Discriminator {
    config: DiscriminatorConfig,
    body: Sequential,
}

impl Discriminator {
    pub fn build(config: DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut body = Sequential::new();
        let mut in_ch = config.input_channels;
        for i in 0..config.encoder_blocks {
            let out_ch = config.base_channels << i;
            let mut block = Sequential::new().with(
                "conv",
                Conv2d::new(in_ch, out_ch, config.kernel, 2, 1, false, &mut rng, INIT_STD),
            );
            if i > 0 {
                block.push("norm", BatchNorm2d::new(out_ch, config.norm));
            }
            block.push("act", LeakyRelu::new(config.activation_slope));
            body.push(i.to_string(), block);
            in_ch = out_ch;
        }
        let k = config.final_kernel;
        let mut head = Sequential::new()
            .with("pad", ReflectionPad2d::new((k - 1) / 2))
            .with("conv", Conv2d::new(in_ch, 1, k, 1, 0, true, &mut rng, INIT_STD));
        if config.sigmoid_output {
            head.push("sigmoid", Sigmoid::new());
        }
        body.push("head", head);
        Ok(Discriminator { config, body })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Patch map for a fundus/angiogram pair at this discriminator's scale.
    pub fn judge(&mut self, fundus: &Tensor, angiogram: &Tensor, mode: Mode) -> Result<Tensor> {
        let (nf, _, hf, wf) = fundus.dim();
        let (na, _, ha, wa) = angiogram.dim();
        if (nf, hf, wf) != (na, ha, wa) {
            return Err(input_err!(
                "fundus {:?} and angiogram {:?} differ in size",
                fundus.dim(),
                angiogram.dim()
            ));
        }
        let s = self.config.input_size;
        if (hf, wf) != (s, s) {
            return Err(input_err!(
                "discriminator built for {s}×{s} inputs got {hf}×{wf}"
            ));
        }
        let x = concat_channels(fundus, angiogram)?;
        self.forward(&x, mode)
    }

    /// Gradient w.r.t. the angiogram half of the last judged pair.
    pub fn backward_angiogram(&mut self, grad: &Tensor) -> Result<Tensor> {
        let dx = self.backward(grad)?;
        let fundus_channels = self.config.input_channels - 1;
        Ok(split_channels(&dx, fundus_channels).1)
    }
}

impl Module for Discriminator {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.dim().1 != self.config.input_channels {
            return Err(config_err!(
                "discriminator expects {} channels, got {}",
                self.config.input_channels,
                x.dim().1
            ));
        }
        self.body.forward(x, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        self.body.backward(grad)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.body.visit(prefix, f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorId {
    D1Fine,
    D2Fine,
    D1Coarse,
    D2Coarse,
}

impl DiscriminatorId {
    pub const ALL: [DiscriminatorId; 4] = [
        DiscriminatorId::D1Fine,
        DiscriminatorId::D2Fine,
        DiscriminatorId::D1Coarse,
        DiscriminatorId::D2Coarse,
    ];

    /// Pyramid level this discriminator judges.
    pub fn level(self) -> usize {
        match self {
            DiscriminatorId::D1Fine => 0,
            DiscriminatorId::D2Fine | DiscriminatorId::D1Coarse => 1,
            DiscriminatorId::D2Coarse => 2,
        }
    }

    pub fn is_fine(self) -> bool {
        matches!(self, DiscriminatorId::D1Fine | DiscriminatorId::D2Fine)
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscriminatorId::D1Fine => "d1_fine",
            DiscriminatorId::D2Fine => "d2_fine",
            DiscriminatorId::D1Coarse => "d1_coarse",
            DiscriminatorId::D2Coarse => "d2_coarse",
        }
    }
}

impl fmt::Display for DiscriminatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings shared by all four discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSetConfig {
    /// Full-resolution side length (level 0).
    pub base_size: usize,
    pub base_channels: usize,
    #[serde(default = "yes")]
    pub sigmoid_output: bool,
}

impl DiscriminatorSetConfig {
    pub fn new(base_size: usize, base_channels: usize) -> Self {
        DiscriminatorSetConfig {
            base_size,
            base_channels,
            sigmoid_output: true,
        }
    }

    pub fn config_for(&self, id: DiscriminatorId) -> DiscriminatorConfig {
        DiscriminatorConfig {
            sigmoid_output: self.sigmoid_output,
            ..DiscriminatorConfig::new(self.base_size >> id.level(), self.base_channels)
        }
    }
}

impl Default for DiscriminatorSetConfig {
    fn default() -> Self {
        DiscriminatorSetConfig::new(512, 64)
    }
}

/// The four discriminators, each with its own weights.
pub struct DiscriminatorSet {
    config: DiscriminatorSetConfig,
    nets: BTreeMap<DiscriminatorId, Discriminator>,
}

impl DiscriminatorSet {
    pub fn build(config: DiscriminatorSetConfig, seed: u64) -> Result<Self> {
        let mut nets = BTreeMap::new();
        for (i, id) in DiscriminatorId::ALL.into_iter().enumerate() {
            let d = Discriminator::build(config.config_for(id), seed.wrapping_add(i as u64 + 1))?;
            nets.insert(id, d);
        }
        Ok(DiscriminatorSet { config, nets })
    }

    pub fn config(&self) -> &DiscriminatorSetConfig {
        &self.config
    }

    pub fn get(&self, id: DiscriminatorId) -> &Discriminator {
        &self.nets[&id]
    }

    pub fn get_mut(&mut self, id: DiscriminatorId) -> &mut Discriminator {
        self.nets.get_mut(&id).expect("all four are built")
    }

    /// Exchanges the weights of two discriminators at the same scale.
    pub fn swap(&mut self, a: DiscriminatorId, b: DiscriminatorId) -> Result<()> {
        if a.level() != b.level() {
            return Err(config_err!("{a} and {b} judge different scales"));
        }
        let da = self.nets.remove(&a).expect("built");
        let db = self.nets.remove(&b).expect("built");
        self.nets.insert(a, db);
        self.nets.insert(b, da);
        Ok(())
    }
}

impl Module for DiscriminatorSet {
    fn forward(&mut self, _x: &Tensor, _mode: Mode) -> Result<Tensor> {
        Err(config_err!("use multi_scale_judge on a discriminator set"))
    }

    fn backward(&mut self, _grad: &Tensor) -> Result<Tensor> {
        Err(config_err!("backpropagate through individual discriminators"))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (id, d) in &mut self.nets {
            d.visit(&join(prefix, id.name()), f);
        }
    }
}

/// Runs each discriminator on its pyramid level.
pub fn multi_scale_judge(
    fundus: &BatchPyramid,
    angiogram: &BatchPyramid,
    set: &mut DiscriminatorSet,
    mode: Mode,
) -> Result<BTreeMap<DiscriminatorId, Tensor>> {
    if fundus.levels.len() != PYRAMID_LEVELS || angiogram.levels.len() != PYRAMID_LEVELS {
        return Err(input_err!("pyramids must have {PYRAMID_LEVELS} levels"));
    }
    for (l, (f, a)) in fundus.levels.iter().zip(&angiogram.levels).enumerate() {
        let (fd, ad) = (f.dim(), a.dim());
        if (fd.0, fd.2, fd.3) != (ad.0, ad.2, ad.3) {
            return Err(input_err!(
                "pyramid level {l} mismatch: fundus {fd:?} vs angiogram {ad:?}"
            ));
        }
    }
    let mut maps = BTreeMap::new();
    for id in DiscriminatorId::ALL {
        let l = id.level();
        let map = set
            .get_mut(id)
            .judge(&fundus.levels[l], &angiogram.levels[l], mode)?;
        maps.insert(id, map);
    }
    Ok(maps)
}
