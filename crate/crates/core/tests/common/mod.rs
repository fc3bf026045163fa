//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use angiogan::dataset::{Manifest, SourcePair, ANGIO_DIR, FUNDUS_DIR, MANIFEST_FILE};
use angiogan::nn::{zero_grad, Module, Slot, Tensor};
use angiogan::ImageTensor;
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
    let mut r = rng(seed);
    Array4::from_shape_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Smooth fundus-like and angiogram-like images that share structure.
pub fn synthetic_pair(id: &str, h: usize, w: usize, phase: f64) -> SourcePair {
    let f = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        ((x as f64) * 0.05 + phase + c as f64).sin() * 0.5 + ((y as f64) * 0.03).cos() * 0.3
    });
    let a = Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        ((x as f64) * 0.05 + phase).sin() * 0.6 + ((y as f64) * 0.03).cos() * 0.2
    });
    SourcePair::new(id, ImageTensor::new(f), ImageTensor::new(a)).unwrap()
}

/// Writes `train + eval` synthetic pairs under `root` in the dataset layout.
pub fn write_dataset(root: &Path, train: usize, eval: usize, h: usize, w: usize) -> Manifest {
    std::fs::create_dir_all(root.join(FUNDUS_DIR)).unwrap();
    std::fs::create_dir_all(root.join(ANGIO_DIR)).unwrap();
    let ids: Vec<String> = (0..train + eval).map(|i| format!("pair{i:02}")).collect();
    for (i, id) in ids.iter().enumerate() {
        let p = synthetic_pair(id, h, w, i as f64 * 0.7);
        p.fundus.save(&root.join(FUNDUS_DIR).join(format!("{id}.png"))).unwrap();
        p.angiogram.save(&root.join(ANGIO_DIR).join(format!("{id}.png"))).unwrap();
    }
    let manifest = Manifest {
        train: ids[..train].to_vec(),
        eval: ids[train..].to_vec(),
    };
    manifest.save(&root.join(MANIFEST_FILE)).unwrap();
    manifest
}

/// (name, length) of every trainable parameter.
pub fn param_names(m: &mut dyn Module) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            out.push((name.to_string(), p.len()));
        }
    });
    out
}

pub fn nudge(m: &mut dyn Module, target: &str, index: usize, delta: f64) {
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            if name == target {
                let v = p.value.iter_mut().nth(index).unwrap();
                *v += delta;
            }
        }
    });
}

pub fn grad_at(m: &mut dyn Module, target: &str, index: usize) -> f64 {
    let mut g = f64::NAN;
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            if name == target {
                g = *p.grad.iter().nth(index).unwrap();
            }
        }
    });
    g
}

pub fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
    (y * w).sum()
}

/// Relative error with a floor on the denominator, so entries whose true
/// gradient is at the finite-difference noise level do not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub const FD_STEP: f64 = 1e-5;

/// Worst relative error between `analytic(m)` and central differences of
/// `loss(m)` over the given parameter entries. `analytic` must leave the
/// gradients in the module's parameters.
pub fn check_gradients<M: Module>(
    m: &mut M,
    entries: &[(String, usize)],
    loss: &mut dyn FnMut(&mut M) -> f64,
    analytic: &mut dyn FnMut(&mut M),
) -> f64 {
    zero_grad(m as &mut dyn Module);
    analytic(m);
    let grads: Vec<f64> = entries.iter().map(|(n, i)| grad_at(m as &mut dyn Module, n, *i)).collect();
    let mut worst: f64 = 0.0;
    for ((name, i), a) in entries.iter().zip(grads) {
        nudge(m as &mut dyn Module, name, *i, FD_STEP);
        let up = loss(m);
        nudge(m as &mut dyn Module, name, *i, -2.0 * FD_STEP);
        let down = loss(m);
        nudge(m as &mut dyn Module, name, *i, FD_STEP);
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}

/// `count` random (parameter, index) entries, weighted by parameter size.
pub fn sample_entries(m: &mut dyn Module, count: usize, seed: u64) -> Vec<(String, usize)> {
    let names = param_names(m);
    let total: usize = names.iter().map(|(_, n)| n).sum();
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let mut k = r.random_range(0..total);
            for (name, n) in &names {
                if k < *n {
                    return (name.clone(), k);
                }
                k -= n;
            }
            unreachable!()
        })
        .collect()
}

/// Every entry of every parameter.
pub fn all_entries(m: &mut dyn Module) -> Vec<(String, usize)> {
    param_names(m)
        .into_iter()
        .flat_map(|(name, n)| (0..n).map(move |i| (name.clone(), i)))
        .collect()
}

/// Redraws every convolution weight from N(0, 1/fan_in). At the 0.02
/// initialization scale, batch norm amplifies a finite-difference step
/// enough to push rectifier inputs across the kink, which says nothing
/// about the analytic gradient; at unit-variance scale that stops happening.
pub fn unit_scale_weights(m: &mut dyn Module, seed: u64) {
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    m.visit("", &mut |name, slot| {
        if let Slot::Param(p) = slot {
            if name.ends_with("weight") && p.value.ndim() == 4 {
                let s = p.value.shape();
                let fan_in = (s[1] * s[2] * s[3]) as f64;
                let d = Normal::new(0.0, fan_in.powf(-0.5)).unwrap();
                p.value.mapv_inplace(|_| d.sample(&mut r));
            }
        }
    });
}
