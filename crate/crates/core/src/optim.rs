use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{Module, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: ArrayD<f64>,
    pub second: ArrayD<f64>,
}

/// Adam with bias correction. Moments are keyed by parameter name and
/// allocated up front, so a network that is never stepped keeps zero moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, module: &mut dyn Module) -> Self {
        let mut moments = BTreeMap::new();
        module.visit("", &mut |name, slot| {
            if let Slot::Param(p) = slot {
                moments.insert(
                    name.to_string(),
                    Moments {
                        first: ArrayD::zeros(p.value.raw_dim()),
                        second: ArrayD::zeros(p.value.raw_dim()),
                    },
                );
            }
        });
        Adam {
            config,
            steps: 0,
            moments,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    pub fn moments_mut(&mut self) -> &mut BTreeMap<String, Moments> {
        &mut self.moments
    }

    /// Applies one update from the gradients currently held in `module`.
    pub fn step(&mut self, module: &mut dyn Module) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let mut missing = None;
        module.visit("", &mut |name, slot| {
            let Slot::Param(p) = slot else { return };
            let Some(m) = self.moments.get_mut(name) else {
                missing.get_or_insert_with(|| name.to_string());
                return;
            };
            Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut m.first)
                .and(&mut m.second)
                .for_each(|w, &g, m1, m2| {
                    *m1 = b1 * *m1 + (1.0 - b1) * g;
                    *m2 = b2 * *m2 + (1.0 - b2) * g * g;
                    let mhat = *m1 / c1;
                    let vhat = *m2 / c2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
        });
        match missing {
            Some(name) => Err(config_err!("optimizer has no moments for parameter {name}")),
            None => Ok(()),
        }
    }
}
