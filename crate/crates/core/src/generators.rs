//! The coarse (half-resolution) and fine (full-resolution) generators.
//!
//! Both follow encoder → residual blocks → decoder → output head. The coarse
//! generator additionally hands its last decoder activation to the fine
//! generator, where it is added to the fine encoder's output before the fine
//! residual blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    BlockVariant, DecoderBlock, EncoderBlock, PaddingMode, ResidualBlock, ResidualBlockConfig,
    DEFAULT_SLOPE, INIT_STD,
};
use crate::error::{config_err, Result};
use crate::nn::{
    join, BatchNormOptions, Conv2d, Mode, Module, ReflectionPad2d, Sequential, Slot, Tanh, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorVariant {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub variant: GeneratorVariant,
    /// Side length of the square input.
    pub input_size: usize,
    pub input_channels: usize,
    pub base_channels: usize,
    pub encoder_blocks: usize,
    pub residual_blocks: usize,
    pub decoder_blocks: usize,
    pub output_channels: usize,
    /// Stride of each encoder block, in order.
    pub encoder_strides: Vec<usize>,
    pub first_kernel: usize,
    pub encoder_kernel: usize,
    pub residual_kernel: usize,
    pub head_kernel: usize,
    pub activation_slope: f64,
    #[serde(default)]
    pub norm: BatchNormOptions,
}

impl GeneratorConfig {
    pub fn coarse() -> Self {
        GeneratorConfig {
            variant: GeneratorVariant::Coarse,
            input_size: 256,
            input_channels: 3,
            base_channels: 64,
            encoder_blocks: 4,
            residual_blocks: 9,
            decoder_blocks: 3,
            output_channels: 1,
            encoder_strides: vec![1, 2, 2, 2],
            first_kernel: 7,
            encoder_kernel: 3,
            residual_kernel: 3,
            head_kernel: 7,
            activation_slope: DEFAULT_SLOPE,
            norm: BatchNormOptions::default(),
        }
    }

    pub fn fine() -> Self {
        GeneratorConfig {
            variant: GeneratorVariant::Fine,
            input_size: 512,
            base_channels: 32,
            encoder_blocks: 2,
            residual_blocks: 3,
            decoder_blocks: 1,
            encoder_strides: vec![1, 2],
            ..Self::coarse()
        }
    }

    /// Same layer plan at reduced width and resolution.
    pub fn scaled(mut self, input_size: usize, base_channels: usize) -> Self {
        self.input_size = input_size;
        self.base_channels = base_channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.variant {
            GeneratorVariant::Coarse => (4, 9, 3),
            GeneratorVariant::Fine => (2, 3, 1),
        };
        let actual = (self.encoder_blocks, self.residual_blocks, self.decoder_blocks);
        if actual != expected {
            return Err(config_err!(
                "{:?} generator needs (encoders, residual, decoders) = {expected:?}, got {actual:?}",
                self.variant
            ));
        }
        if self.encoder_strides.len() != self.encoder_blocks {
            return Err(config_err!(
                "{} encoder strides given for {} encoder blocks",
                self.encoder_strides.len(),
                self.encoder_blocks
            ));
        }
        if self.encoder_strides.iter().any(|s| !(*s == 1 || *s == 2)) {
            return Err(config_err!("encoder strides must be 1 or 2"));
        }
        let downs = self.downsampling_steps();
        if self.variant == GeneratorVariant::Coarse && downs != self.decoder_blocks {
            return Err(config_err!(
                "coarse generator with {downs} stride-2 encoders and {} decoders is not size-preserving",
                self.decoder_blocks
            ));
        }
        if self.variant == GeneratorVariant::Fine && downs != self.decoder_blocks {
            return Err(config_err!(
                "fine generator with {downs} stride-2 encoders and {} decoders is not size-preserving",
                self.decoder_blocks
            ));
        }
        if self.base_channels == 0 || self.input_channels == 0 || self.output_channels == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << downs) {
            return Err(config_err!(
                "input size {} is not divisible by {}",
                self.input_size,
                1 << downs
            ));
        }
        for k in [self.first_kernel, self.encoder_kernel, self.residual_kernel, self.head_kernel] {
            if k % 2 == 0 {
                return Err(config_err!("generator kernels must be odd, got {k}"));
            }
        }
        Ok(())
    }

    pub fn downsampling_steps(&self) -> usize {
        self.encoder_strides.iter().filter(|&&s| s == 2).count()
    }

    /// Channels of encoder block `i` (doubling from the base width).
    pub fn encoder_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn residual_channels(&self) -> usize {
        self.encoder_channels(self.encoder_blocks - 1)
    }

    pub fn decoder_channels(&self, i: usize) -> usize {
        self.residual_channels() >> (i + 1)
    }

    /// Channels entering the output head (the coarse generator's feature width).
    pub fn feature_channels(&self) -> usize {
        if self.decoder_blocks == 0 {
            self.residual_channels()
        } else {
            self.decoder_channels(self.decoder_blocks - 1)
        }
    }

    /// Side length at the residual stage (the fine generator's handoff point).
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.downsampling_steps()
    }
}

/// Coarse generator output: the angiogram and the handoff feature.
#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub angiogram: Tensor,
    pub feature: Tensor,
}

pub struct Generator {
    config: GeneratorConfig,
    encoder: Sequential,
    residual: Sequential,
    decoder: Sequential,
    head: Sequential,
}

impl Generator {
    /// Builds with weights drawn from N(0, 0.02²) using a seeded stream.
    pub fn build(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (slope, norm) = (config.activation_slope, config.norm);

        let mut encoder = Sequential::new();
        let mut in_ch = config.input_channels;
        for (i, &stride) in config.encoder_strides.iter().enumerate() {
            let out_ch = config.encoder_channels(i);
            let kernel = if i == 0 {
                config.first_kernel
            } else {
                config.encoder_kernel
            };
            encoder.push(
                i.to_string(),
                EncoderBlock::new(in_ch, out_ch, kernel, stride, slope, norm, &mut rng)?,
            );
            in_ch = out_ch;
        }

        let mut residual = Sequential::new();
        let block_cfg = ResidualBlockConfig {
            channels: in_ch,
            kernel: config.residual_kernel,
            variant: BlockVariant::Proposed,
            activation_slope: slope,
            padding_mode: PaddingMode::Reflection,
            norm,
        };
        for i in 0..config.residual_blocks {
            residual.push(i.to_string(), ResidualBlock::new(block_cfg, &mut rng)?);
        }

        let mut decoder = Sequential::new();
        for i in 0..config.decoder_blocks {
            let out_ch = config.decoder_channels(i);
            decoder.push(
                i.to_string(),
                DecoderBlock::new(in_ch, out_ch, slope, norm, &mut rng),
            );
            in_ch = out_ch;
        }

        let k = config.head_kernel;
        let head = Sequential::new()
            .with("pad", ReflectionPad2d::new((k - 1) / 2))
            .with(
                "conv",
                Conv2d::new(in_ch, config.output_channels, k, 1, 0, true, &mut rng, INIT_STD),
            )
            .with("tanh", Tanh::new());

        Ok(Generator {
            config,
            encoder,
            residual,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn residual_block_count(&self) -> usize {
        self.residual.len()
    }

    pub fn parameter_count(&mut self) -> usize {
        crate::nn::parameter_count(self)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dim();
        let s = self.config.input_size;
        if c != self.config.input_channels || h != s || w != s {
            return Err(config_err!(
                "{:?} generator expects {}×{s}×{s} input, got {c}×{h}×{w}",
                self.config.variant,
                self.config.input_channels
            ));
        }
        Ok(())
    }

    fn require(&self, variant: GeneratorVariant) -> Result<()> {
        if self.config.variant != variant {
            return Err(config_err!(
                "operation needs a {variant:?} generator, this one is {:?}",
                self.config.variant
            ));
        }
        Ok(())
    }

    pub fn coarse_forward(&mut self, fundus_half: &Tensor, mode: Mode) -> Result<CoarseOutput> {
        self.require(GeneratorVariant::Coarse)?;
        self.check_input(fundus_half)?;
        let h = self.encoder.forward(fundus_half, mode)?;
        let h = self.residual.forward(&h, mode)?;
        let feature = self.decoder.forward(&h, mode)?;
        let angiogram = self.head.forward(&feature, mode)?;
        Ok(CoarseOutput { angiogram, feature })
    }

    /// Gradient w.r.t. the coarse input, given gradients w.r.t. the angiogram
    /// and (optionally) the handoff feature.
    pub fn coarse_backward(&mut self, d_angiogram: &Tensor, d_feature: Option<&Tensor>) -> Result<Tensor> {
        self.require(GeneratorVariant::Coarse)?;
        let mut g = self.head.backward(d_angiogram)?;
        if let Some(df) = d_feature {
            g += df;
        }
        let g = self.decoder.backward(&g)?;
        let g = self.residual.backward(&g)?;
        self.encoder.backward(&g)
    }

    /// Fine encoder activation at the handoff point.
    pub fn encode(&mut self, fundus: &Tensor, mode: Mode) -> Result<Tensor> {
        self.require(GeneratorVariant::Fine)?;
        self.check_input(fundus)?;
        self.encoder.forward(fundus, mode)
    }

    /// Residual stage, decoder and head applied to a handoff activation.
    pub fn decode_from(&mut self, handoff: &Tensor, mode: Mode) -> Result<Tensor> {
        self.require(GeneratorVariant::Fine)?;
        let h = self.residual.forward(handoff, mode)?;
        let h = self.decoder.forward(&h, mode)?;
        self.head.forward(&h, mode)
    }

    pub fn fine_forward(&mut self, fundus: &Tensor, coarse_feature: &Tensor, mode: Mode) -> Result<Tensor> {
        self.require(GeneratorVariant::Fine)?;
        let n = fundus.dim().0;
        let b = self.config.bottleneck_size();
        let expect = (n, self.config.residual_channels(), b, b);
        if coarse_feature.dim() != expect {
            return Err(config_err!(
                "fine generator expects a coarse feature of shape {expect:?}, got {:?}",
                coarse_feature.dim()
            ));
        }
        let mut h = self.encode(fundus, mode)?;
        h += coarse_feature;
        self.decode_from(&h, mode)
    }

    /// Returns `(d_fundus, d_coarse_feature)`.
    pub fn fine_backward(&mut self, d_angiogram: &Tensor) -> Result<(Tensor, Tensor)> {
        self.require(GeneratorVariant::Fine)?;
        let g = self.head.backward(d_angiogram)?;
        let g = self.decoder.backward(&g)?;
        let d_handoff = self.residual.backward(&g)?;
        let d_input = self.encoder.backward(&d_handoff)?;
        Ok((d_input, d_handoff))
    }

    /// All trainable values flattened in visit order.
    pub fn parameter_vector(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                out.extend(p.value.iter().copied());
            }
        });
        out
    }
}

impl Module for Generator {
    /// Coarse: returns the angiogram. Fine: runs without a coarse feature
    /// (equivalent to a zero handoff).
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        match self.config.variant {
            GeneratorVariant::Coarse => Ok(self.coarse_forward(x, mode)?.angiogram),
            GeneratorVariant::Fine => {
                let h = self.encode(x, mode)?;
                self.decode_from(&h, mode)
            }
        }
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self.config.variant {
            GeneratorVariant::Coarse => self.coarse_backward(grad, None),
            GeneratorVariant::Fine => Ok(self.fine_backward(grad)?.0),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.residual.visit(&join(prefix, "residual"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}
