//! A small CPU layer library with explicit backward passes.
//!
//! Feature maps are `N×C×H×W` arrays of `f64`. Every layer caches what it
//! needs during [`Module::forward`] (except in [`Mode::Inference`]) and
//! accumulates parameter gradients in [`Module::backward`].

mod activation;
mod conv;
mod norm;
mod pad;

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayD, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use activation::{LeakyRelu, Sigmoid, Tanh};
pub use conv::{Conv2d, ConvTranspose2d, DepthwiseConv2d};
pub use norm::{BatchNorm2d, BatchNormOptions};
pub use pad::ReflectionPad2d;

pub use conv::{col2im, im2col, Geometry};

use crate::error::{config_err, Result};

pub type Tensor = Array4<f64>;

/// How a forward pass treats normalization statistics and caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated; caches kept for backward.
    Train,
    /// Batch statistics, but running statistics are left untouched. Used for
    /// networks whose weights are frozen while another network trains.
    Frozen,
    /// Running statistics; nothing cached.
    Inference,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, Mode::Inference)
    }

    pub fn updates_running_stats(self) -> bool {
        matches!(self, Mode::Train)
    }

    pub fn caches(self) -> bool {
        !matches!(self, Mode::Inference)
    }
}

/// A trainable array and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// A named slot handed out by [`Module::visit`].
pub enum Slot<'a> {
    Param(&'a mut Param),
    /// Tracked but not trained (batch-norm running statistics).
    Buffer(&'a mut ArrayD<f64>),
}

pub trait Module: Send {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Propagates `grad` (w.r.t. the last forward output) back to the input,
    /// accumulating parameter gradients along the way.
    fn backward(&mut self, grad: &Tensor) -> Result<Tensor>;

    /// Visits every parameter and buffer under a dotted name rooted at `prefix`.
    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, Slot<'_>)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Layers applied in order, each under its own name.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<(String, Box<dyn Module>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Module + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Module + 'static) -> Self {
        self.push(name, layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|(n, _)| n.as_str())
    }
}

impl Module for Sequential {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut iter = self.layers.iter_mut();
        let Some((_, first)) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x, mode)?;
        for (_, layer) in iter {
            h = layer.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut iter = self.layers.iter_mut().rev();
        let Some((_, last)) = iter.next() else {
            return Ok(grad.clone());
        };
        let mut g = last.backward(grad)?;
        for (_, layer) in iter {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        for (name, layer) in &mut self.layers {
            layer.visit(&join(prefix, name), f);
        }
    }
}

/// Zero-mean Gaussian draw of the given shape.
pub(crate) fn normal_array(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    ArrayD::from_shape_simple_fn(shape.to_vec(), || dist.sample(rng))
}

/// Total element count of all trainable parameters.
pub fn parameter_count(module: &mut dyn Module) -> usize {
    let mut total = 0;
    module.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            total += p.len();
        }
    });
    total
}

/// Parameter plus buffer element count.
pub fn tracked_count(module: &mut dyn Module) -> usize {
    let mut total = 0;
    module.visit("", &mut |_, slot| match slot {
        Slot::Param(p) => total += p.len(),
        Slot::Buffer(b) => total += b.len(),
    });
    total
}

pub fn zero_grad(module: &mut dyn Module) {
    module.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            p.grad.fill(0.0);
        }
    });
}

/// Concatenates two feature maps along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, _, ha, wa) = a.dim();
    let (nb, _, hb, wb) = b.dim();
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(config_err!(
            "cannot concatenate {:?} and {:?} along channels",
            a.dim(),
            b.dim()
        ));
    }
    Ok(ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("shapes checked"))
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let a = t.slice(ndarray::s![.., ..first, .., ..]).to_owned();
    let b = t.slice(ndarray::s![.., first.., .., ..]).to_owned();
    (a, b)
}

pub(crate) fn missing_cache(layer: &str) -> crate::error::Error {
    config_err!("{layer}: backward called without a cached training-mode forward")
}

/// Every parameter and buffer value under its dotted name.
pub fn state_dict(module: &mut dyn Module, prefix: &str) -> BTreeMap<String, ArrayD<f64>> {
    let mut out = BTreeMap::new();
    module.visit(prefix, &mut |name, slot| {
        let v = match slot {
            Slot::Param(p) => p.value.clone(),
            Slot::Buffer(b) => b.clone(),
        };
        out.insert(name.to_string(), v);
    });
    out
}

/// Overwrites every parameter and buffer from `values`. Each name must be
/// present with a matching shape; extra entries are ignored.
pub fn load_state_dict(
    module: &mut dyn Module,
    prefix: &str,
    values: &BTreeMap<String, ArrayD<f64>>,
) -> Result<()> {
    let mut problem = None;
    module.visit(prefix, &mut |name, slot| {
        let target = match slot {
            Slot::Param(p) => &mut p.value,
            Slot::Buffer(b) => b,
        };
        match values.get(name) {
            Some(v) if v.shape() == target.shape() => target.assign(v),
            Some(v) => {
                problem.get_or_insert_with(|| {
                    format!("{name}: shape {:?}, expected {:?}", v.shape(), target.shape())
                });
            }
            None => {
                problem.get_or_insert_with(|| format!("{name}: missing"));
            }
        }
    });
    match problem {
        Some(p) => Err(config_err!("cannot load state: {p}")),
        None => Ok(()),
    }
}
