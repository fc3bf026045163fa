//! Layer-level building blocks: the separable-convolution residual block, the
//! plain two-convolution baseline it replaces, and the encoder/decoder units
//! the generators and discriminators are assembled from.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::nn::{
    join, BatchNorm2d, BatchNormOptions, Conv2d, ConvTranspose2d, DepthwiseConv2d, LeakyRelu,
    Mode, Module, ReflectionPad2d, Sequential, Slot, Tensor,
};

/// Standard deviation of the Gaussian weight initializer.
pub const INIT_STD: f64 = 0.02;

pub const DEFAULT_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    /// Two plain convolutions with pre-activation.
    Original,
    /// Convolution unit followed by a separable-convolution unit.
    Proposed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Reflection,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlockConfig {
    pub channels: usize,
    pub kernel: usize,
    pub variant: BlockVariant,
    pub activation_slope: f64,
    pub padding_mode: PaddingMode,
    #[serde(default)]
    pub norm: BatchNormOptions,
}

impl ResidualBlockConfig {
    pub fn new(variant: BlockVariant, channels: usize, kernel: usize) -> Self {
        ResidualBlockConfig {
            channels,
            kernel,
            variant,
            activation_slope: DEFAULT_SLOPE,
            padding_mode: PaddingMode::Reflection,
            norm: BatchNormOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(config_err!("residual block needs at least one channel"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(config_err!(
                "residual block kernel must be a positive odd integer, got {}",
                self.kernel
            ));
        }
        Ok(())
    }
}

/// Parameter tally for one block. Convolutions are bias-free; each batch
/// norm tracks scale, shift, running mean and running variance per channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParameterCount {
    pub convolution_weights: usize,
    pub normalization_params: usize,
    pub total: usize,
}

impl LayerParameterCount {
    fn new(convolution_weights: usize, normalization_params: usize) -> Self {
        LayerParameterCount {
            convolution_weights,
            normalization_params,
            total: convolution_weights + normalization_params,
        }
    }
}

/// Parameters per batch-norm channel under the counting convention.
pub const NORM_VALUES_PER_CHANNEL: usize = 4;

pub fn count_parameters(config: &ResidualBlockConfig) -> LayerParameterCount {
    let (c, k) = (config.channels, config.kernel);
    let conv = k * k * c * c;
    let separable = k * k * c + c * c;
    let norms = 2 * NORM_VALUES_PER_CHANNEL * c;
    match config.variant {
        BlockVariant::Original => LayerParameterCount::new(2 * conv, norms),
        BlockVariant::Proposed => LayerParameterCount::new(conv + separable, norms),
    }
}

/// Depthwise K×K convolution followed by a 1×1 cross-channel convolution.
pub struct SeparableConv2d {
    depthwise: DepthwiseConv2d,
    pointwise: Conv2d,
}

impl SeparableConv2d {
    pub fn new(channels: usize, kernel: usize, padding: usize, rng: &mut impl Rng, std: f64) -> Self {
        SeparableConv2d {
            depthwise: DepthwiseConv2d::new(channels, kernel, padding, rng, std),
            pointwise: Conv2d::new(channels, channels, 1, 1, 0, false, rng, std),
        }
    }

    /// Builds from explicit weights: `depthwise` holds `C` filters of `K×K`
    /// (row-major), `pointwise` is the `C×C` mixing matrix (row = output).
    pub fn from_weights(channels: usize, kernel: usize, depthwise: &[f64], pointwise: &[f64]) -> Result<Self> {
        if depthwise.len() != channels * kernel * kernel {
            return Err(config_err!(
                "depthwise weights: expected {} values, got {}",
                channels * kernel * kernel,
                depthwise.len()
            ));
        }
        if pointwise.len() != channels * channels {
            return Err(config_err!(
                "pointwise weights: expected {} values, got {}",
                channels * channels,
                pointwise.len()
            ));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut sep = SeparableConv2d::new(channels, kernel, 0, &mut rng, 1.0);
        sep.depthwise
            .weight_mut()
            .value
            .iter_mut()
            .zip(depthwise)
            .for_each(|(w, v)| *w = *v);
        sep.pointwise
            .weight_mut()
            .value
            .iter_mut()
            .zip(pointwise)
            .for_each(|(w, v)| *w = *v);
        Ok(sep)
    }
}

impl Module for SeparableConv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.depthwise.forward(x, mode)?;
        self.pointwise.forward(&h, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let g = self.pointwise.backward(grad)?;
        self.depthwise.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.depthwise.visit(&join(prefix, "depthwise"), f);
        self.pointwise.visit(&join(prefix, "pointwise"), f);
    }
}

/// Convenience for the separable-convolution operation on its own.
pub fn separable_conv_forward(
    x: &Tensor,
    channels: usize,
    kernel: usize,
    depthwise: &[f64],
    pointwise: &[f64],
) -> Result<Tensor> {
    if x.dim().1 != channels {
        return Err(config_err!(
            "separable convolution over {channels} channels given a {}-channel input",
            x.dim().1
        ));
    }
    SeparableConv2d::from_weights(channels, kernel, depthwise, pointwise)?.forward(x, Mode::Inference)
}

/// `y = F(x) + x`, where `F` is two padded convolution units.
pub struct ResidualBlock {
    config: ResidualBlockConfig,
    body: Sequential,
}

impl ResidualBlock {
    pub fn new(config: ResidualBlockConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.channels, config.kernel);
        let half = (k - 1) / 2;
        let (pad, conv_pad) = match config.padding_mode {
            PaddingMode::Reflection => (half, 0),
            PaddingMode::Zero => (0, half),
        };
        let conv = |rng: &mut _| Conv2d::new(c, c, k, 1, conv_pad, false, rng, INIT_STD);
        let norm = || BatchNorm2d::new(c, config.norm);
        let act = || LeakyRelu::new(config.activation_slope);
        let body = match config.variant {
            BlockVariant::Proposed => Sequential::new()
                .with("pad0", ReflectionPad2d::new(pad))
                .with("conv", conv(rng))
                .with("norm0", norm())
                .with("act0", act())
                .with("pad1", ReflectionPad2d::new(pad))
                .with("sepconv", SeparableConv2d::new(c, k, conv_pad, rng, INIT_STD))
                .with("norm1", norm())
                .with("act1", act()),
            BlockVariant::Original => Sequential::new()
                .with("norm0", norm())
                .with("act0", act())
                .with("pad0", ReflectionPad2d::new(pad))
                .with("conv0", conv(rng))
                .with("norm1", norm())
                .with("act1", act())
                .with("pad1", ReflectionPad2d::new(pad))
                .with("conv1", conv(rng)),
        };
        Ok(ResidualBlock { config, body })
    }

    pub fn config(&self) -> &ResidualBlockConfig {
        &self.config
    }
}

impl Module for ResidualBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = x.dim();
        if c != self.config.channels {
            return Err(config_err!(
                "residual block has {} channels, input has {c}",
                self.config.channels
            ));
        }
        if h < self.config.kernel || w < self.config.kernel {
            return Err(input_err!(
                "{h}×{w} input is smaller than the {}×{} kernel",
                self.config.kernel,
                self.config.kernel
            ));
        }
        let mut y = self.body.forward(x, mode)?;
        y += x;
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut dx = self.body.backward(grad)?;
        dx += grad;
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.body.visit(prefix, f);
    }
}

pub fn residual_block_forward(block: &mut ResidualBlock, x: &Tensor, mode: Mode) -> Result<Tensor> {
    block.forward(x, mode)
}

/// Reflection-padded convolution → batch norm → leaky rectifier.
pub struct EncoderBlock {
    stride: usize,
    body: Sequential,
}

impl EncoderBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        slope: f64,
        norm: BatchNormOptions,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(config_err!("encoder stride must be 1 or 2, got {stride}"));
        }
        if kernel.is_multiple_of(2) {
            return Err(config_err!("encoder kernel must be odd, got {kernel}"));
        }
        let body = Sequential::new()
            .with("pad", ReflectionPad2d::new((kernel - 1) / 2))
            .with(
                "conv",
                Conv2d::new(in_channels, out_channels, kernel, stride, 0, false, rng, INIT_STD),
            )
            .with("norm", BatchNorm2d::new(out_channels, norm))
            .with("act", LeakyRelu::new(slope));
        Ok(EncoderBlock { stride, body })
    }
}

impl Module for EncoderBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dim();
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(input_err!(
                "{h}×{w} input is not divisible by encoder stride {}",
                self.stride
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

/// Stride-2 transposed convolution → batch norm → leaky rectifier; doubles H and W.
pub struct DecoderBlock {
    body: Sequential,
}

impl DecoderBlock {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        slope: f64,
        norm: BatchNormOptions,
        rng: &mut impl Rng,
    ) -> Self {
        let body = Sequential::new()
            .with(
                "deconv",
                ConvTranspose2d::new(in_channels, out_channels, 3, 2, 1, 1, rng, INIT_STD),
            )
            .with("norm", BatchNorm2d::new(out_channels, norm))
            .with("act", LeakyRelu::new(slope));
        DecoderBlock { body }
    }
}

impl Module for DecoderBlock {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.body.forward(x, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        self.body.backward(grad)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        self.body.visit(prefix, f);
    }
}
