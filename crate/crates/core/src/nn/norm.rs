use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

use super::{join, missing_cache, Mode, Module, Param, Slot, Tensor};
use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchNormOptions {
    pub epsilon: f64,
    /// Weight of the newest batch in the running statistics.
    pub momentum: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        BatchNormOptions {
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

struct Cache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

/// Per-channel batch normalization with learned scale/shift and running
/// mean/variance. Contributes four tracked values per channel.
pub struct BatchNorm2d {
    channels: usize,
    options: BatchNormOptions,
    scale: Param,
    shift: Param,
    running_mean: ArrayD<f64>,
    running_var: ArrayD<f64>,
    cache: Option<Cache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, options: BatchNormOptions) -> Self {
        BatchNorm2d {
            channels,
            options,
            scale: Param::new(ArrayD::from_elem(vec![channels], 1.0)),
            shift: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::from_elem(vec![channels], 1.0),
            cache: None,
        }
    }

    pub fn scale_mut(&mut self) -> &mut Param {
        &mut self.scale
    }

    pub fn shift_mut(&mut self) -> &mut Param {
        &mut self.shift
    }

    pub fn set_running(&mut self, mean: &[f64], var: &[f64]) {
        self.running_mean = ArrayD::from_shape_vec(vec![self.channels], mean.to_vec())
            .expect("one value per channel");
        self.running_var = ArrayD::from_shape_vec(vec![self.channels], var.to_vec())
            .expect("one value per channel");
    }
}

impl Module for BatchNorm2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dim();
        if c != self.channels {
            return Err(config_err!(
                "batch norm expects {} channels, got {c}",
                self.channels
            ));
        }
        let count = (n * h * w) as f64;
        let eps = self.options.epsilon;
        let mut out = x.to_owned();
        let mut inv_stds = Vec::with_capacity(c);
        for ch in 0..c {
            let xc = x.index_axis(Axis(1), ch);
            let (mean, var) = if mode.uses_batch_stats() {
                let mean = xc.sum() / count;
                let var = xc.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / count;
                if mode.updates_running_stats() {
                    let m = self.options.momentum;
                    let unbiased = if count > 1.0 {
                        var * count / (count - 1.0)
                    } else {
                        var
                    };
                    self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * mean;
                    self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * unbiased;
                }
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let inv_std = 1.0 / (var + eps).sqrt();
            inv_stds.push(inv_std);
            out.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mean) * inv_std);
        }
        let normalized = mode.caches().then(|| out.clone());
        for ch in 0..c {
            let (g, b) = (self.scale.value[ch], self.shift.value[ch]);
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * v + b);
        }
        self.cache = normalized.map(|normalized| Cache {
            normalized,
            inv_std: inv_stds,
        });
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batch_norm"))?;
        let (n, c, h, w) = grad.dim();
        let count = (n * h * w) as f64;
        let mut dx = Tensor::zeros(grad.raw_dim());
        for ch in 0..c {
            let gc = grad.index_axis(Axis(1), ch);
            let xh = cache.normalized.index_axis(Axis(1), ch);
            let sum_g = gc.sum();
            let sum_gx = (&gc * &xh).sum();
            self.scale.grad[ch] += sum_gx;
            self.shift.grad[ch] += sum_g;
            let k = self.scale.value[ch] * cache.inv_std[ch] / count;
            let mut dc = dx.index_axis_mut(Axis(1), ch);
            ndarray::Zip::from(&mut dc)
                .and(&gc)
                .and(&xh)
                .for_each(|d, &g, &x| *d = k * (count * g - sum_g - x * sum_gx));
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "scale"), Slot::Param(&mut self.scale));
        f(&join(prefix, "shift"), Slot::Param(&mut self.shift));
        f(&join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized() {
        let x = Tensor::from_shape_fn((2, 2, 3, 3), |(n, c, h, w)| {
            (n * 7 + c * 3 + h * 2 + w) as f64 * 0.37 - 1.0
        });
        let mut bn = BatchNorm2d::new(2, BatchNormOptions::default());
        let y = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..2 {
            let yc = y.index_axis(Axis(1), ch);
            let mean = yc.sum() / 18.0;
            let var = yc.fold(0.0, |a, &v| a + v * v) / 18.0 - mean * mean;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running statistics moved toward the batch statistics
        assert!(bn.running_mean.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn frozen_mode_leaves_running_stats() {
        let x = Tensor::from_elem((1, 1, 2, 2), 3.0);
        let mut bn = BatchNorm2d::new(1, BatchNormOptions::default());
        bn.forward(&x, Mode::Frozen).unwrap();
        assert_eq!(bn.running_mean[0], 0.0);
        assert_eq!(bn.running_var[0], 1.0);
    }
}
