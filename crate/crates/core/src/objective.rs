//! Least-squares adversarial losses, L2 reconstruction and the weighted
//! generator objective. All reductions are means, so losses are comparable
//! across discriminators with different patch-map sizes.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Weight on the summed reconstruction terms.
    pub lambda_weight: f64,
    /// Discriminator target for real pairs.
    pub real_target: f64,
    /// Discriminator target for generated pairs.
    pub fake_target_d: f64,
    /// Target the generator pushes its pairs toward.
    pub fake_target_g: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_weight: 10.0,
            real_target: 1.0,
            fake_target_d: 0.0,
            fake_target_g: 1.0,
        }
    }
}

impl ObjectiveConfig {
    /// With a sigmoid discriminator head every target must lie in `[0, 1]`;
    /// without it any finite target (e.g. a −1/+1 coding) is allowed.
    pub fn validate(&self, sigmoid_output: bool) -> Result<()> {
        if !(self.lambda_weight >= 0.0 && self.lambda_weight.is_finite()) {
            return Err(config_err!(
                "lambda must be a finite non-negative number, got {}",
                self.lambda_weight
            ));
        }
        for (name, t) in [
            ("real_target", self.real_target),
            ("fake_target_d", self.fake_target_d),
            ("fake_target_g", self.fake_target_g),
        ] {
            if !t.is_finite() || (sigmoid_output && !(0.0..=1.0).contains(&t)) {
                return Err(config_err!("{name} = {t} lies outside the sigmoid range [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Mean of `(map − target)²`.
pub fn squared_error(map: &Tensor, target: f64) -> f64 {
    if map.is_empty() {
        return 0.0;
    }
    map.fold(0.0, |acc, &v| acc + (v - target) * (v - target)) / map.len() as f64
}

/// Gradient of [`squared_error`] w.r.t. `map`.
pub fn squared_error_grad(map: &Tensor, target: f64) -> Tensor {
    let n = map.len().max(1) as f64;
    map.mapv(|v| 2.0 * (v - target) / n)
}

/// Discriminator loss for one group: per discriminator, mean squared
/// distance of real maps to the real target plus fake maps to the fake
/// target; summed over the group.
pub fn lsgan_d_loss(real_maps: &[&Tensor], fake_maps: &[&Tensor], config: &ObjectiveConfig) -> f64 {
    let real: f64 = real_maps
        .iter()
        .map(|m| squared_error(m, config.real_target))
        .sum();
    let fake: f64 = fake_maps
        .iter()
        .map(|m| squared_error(m, config.fake_target_d))
        .sum();
    real + fake
}

/// Generator-side adversarial loss for one group.
pub fn lsgan_g_loss(fake_maps: &[&Tensor], config: &ObjectiveConfig) -> f64 {
    fake_maps
        .iter()
        .map(|m| squared_error(m, config.fake_target_g))
        .sum()
}

/// Mean squared difference over every element.
pub fn recon_l2<D: Dimension>(generated: &Array<f64, D>, real: &Array<f64, D>) -> Result<f64> {
    if generated.shape() != real.shape() {
        return Err(input_err!(
            "reconstruction between {:?} and {:?}",
            generated.shape(),
            real.shape()
        ));
    }
    if generated.is_empty() {
        return Ok(0.0);
    }
    let sum = ndarray::Zip::from(generated)
        .and(real)
        .fold(0.0, |acc, &g, &r| acc + (g - r) * (g - r));
    Ok(sum / generated.len() as f64)
}

/// Gradient of [`recon_l2`] w.r.t. `generated`.
pub fn recon_l2_grad(generated: &Tensor, real: &Tensor) -> Result<Tensor> {
    if generated.shape() != real.shape() {
        return Err(input_err!(
            "reconstruction between {:?} and {:?}",
            generated.shape(),
            real.shape()
        ));
    }
    let n = generated.len().max(1) as f64;
    Ok((generated - real).mapv(|d| 2.0 * d / n))
}

pub fn total_generator_objective(
    adv_fine: f64,
    adv_coarse: f64,
    l2_fine: f64,
    l2_coarse: f64,
    config: &ObjectiveConfig,
) -> f64 {
    adv_fine + adv_coarse + config.lambda_weight * (l2_fine + l2_coarse)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossRecord {
    pub cycle: u64,
    pub d_fine_loss: f64,
    pub d_coarse_loss: f64,
    pub g_fine_adv: f64,
    pub g_coarse_adv: f64,
    pub l2_fine: f64,
    pub l2_coarse: f64,
    pub total: f64,
}

impl LossRecord {
    pub const HEADER: [&'static str; 8] = [
        "cycle",
        "d_fine_loss",
        "d_coarse_loss",
        "g_fine_adv",
        "g_coarse_adv",
        "l2_fine",
        "l2_coarse",
        "total",
    ];

    /// Name of the first non-finite loss, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [
            ("d_fine_loss", self.d_fine_loss),
            ("d_coarse_loss", self.d_coarse_loss),
            ("g_fine_adv", self.g_fine_adv),
            ("g_coarse_adv", self.g_coarse_adv),
            ("l2_fine", self.l2_fine),
            ("l2_coarse", self.l2_coarse),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::from_elem((1, 1, 1, 1), v)
    }

    #[test]
    fn discriminator_examples() {
        let c = ObjectiveConfig::default();
        assert_eq!(lsgan_d_loss(&[&scalar(1.0)], &[&scalar(0.0)], &c), 0.0);
        assert!((lsgan_d_loss(&[&scalar(0.5)], &[&scalar(0.25)], &c) - 0.3125).abs() < 1e-12);
        assert!((lsgan_d_loss(&[&scalar(0.5)], &[&scalar(0.5)], &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn generator_examples() {
        let c = ObjectiveConfig::default();
        assert_eq!(lsgan_g_loss(&[&scalar(1.0)], &c), 0.0);
        assert_eq!(lsgan_g_loss(&[&scalar(0.0), &scalar(0.0)], &c), 2.0);
        assert!((lsgan_g_loss(&[&scalar(0.5)], &c) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_examples() {
        let a = Tensor::from_elem((1, 1, 4, 4), 0.3);
        assert_eq!(recon_l2(&a, &a).unwrap(), 0.0);
        let b = a.mapv(|v| v + 0.5);
        assert!((recon_l2(&a, &b).unwrap() - 0.25).abs() < 1e-12);
        let mut c = a.clone();
        c[[0, 0, 2, 1]] += 1.0;
        assert!((recon_l2(&a, &c).unwrap() - 1.0 / 16.0).abs() < 1e-12);
        assert!(recon_l2(&a, &Tensor::zeros((1, 1, 4, 3))).is_err());
    }

    #[test]
    fn total_examples() {
        let c = ObjectiveConfig::default();
        assert_eq!(total_generator_objective(0.0, 0.0, 0.0, 0.0, &c), 0.0);
        assert!((total_generator_objective(0.25, 0.25, 0.1, 0.2, &c) - 3.5).abs() < 1e-12);
        let off = ObjectiveConfig {
            lambda_weight: 0.0,
            ..c
        };
        assert_eq!(total_generator_objective(0.25, 0.5, 0.1, 0.2, &off), 0.75);
    }

    #[test]
    fn config_validation() {
        let mut c = ObjectiveConfig::default();
        assert!(c.validate(true).is_ok());
        c.lambda_weight = -1.0;
        assert!(c.validate(true).is_err());
        c.lambda_weight = 1.0;
        c.fake_target_d = -1.0;
        assert!(c.validate(true).is_err());
        assert!(c.validate(false).is_ok());
    }
}
