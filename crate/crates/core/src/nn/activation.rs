use super::{missing_cache, Mode, Module, Tensor};
use crate::error::Result;

pub struct LeakyRelu {
    slope: f64,
    cache: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope, cache: None }
    }
}

impl Module for LeakyRelu {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = self.slope;
        self.cache = mode.caches().then(|| x.clone());
        Ok(x.mapv(|v| if v > 0.0 { v } else { s * v }))
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("leaky_relu"))?;
        let s = self.slope;
        let mut dx = grad.clone();
        ndarray::Zip::from(&mut dx)
            .and(x)
            .for_each(|d, &v| {
                if v <= 0.0 {
                    *d *= s
                }
            });
        Ok(dx)
    }
}

#[derive(Default)]
pub struct Tanh {
    out: Option<Tensor>,
}

impl Tanh {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Module for Tanh {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = x.mapv(f64::tanh);
        self.out = mode.caches().then(|| y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = self.out.as_ref().ok_or_else(|| missing_cache("tanh"))?;
        Ok(grad * &y.mapv(|v| 1.0 - v * v))
    }
}

#[derive(Default)]
pub struct Sigmoid {
    out: Option<Tensor>,
}

impl Sigmoid {
    pub fn new() -> Self {
        Self::default()
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Module for Sigmoid {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = x.mapv(sigmoid);
        self.out = mode.caches().then(|| y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = self.out.as_ref().ok_or_else(|| missing_cache("sigmoid"))?;
        Ok(grad * &y.mapv(|v| v * (1.0 - v)))
    }
}
