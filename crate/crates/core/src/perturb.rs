//! Fundus perturbations used to probe robustness: three global changes
//! (blur, sharpen, noise) and two radial distortions (whirl, pinch).

use std::fmt;
use std::str::FromStr;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::image::ImageTensor;

/// Blur used inside the unsharp mask.
pub const SHARPEN_SIGMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    None,
    Blur,
    Sharpen,
    Noise,
    Whirl,
    Pinch,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 6] = [
        PerturbationKind::None,
        PerturbationKind::Noise,
        PerturbationKind::Blur,
        PerturbationKind::Sharpen,
        PerturbationKind::Whirl,
        PerturbationKind::Pinch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::None => "none",
            PerturbationKind::Blur => "blur",
            PerturbationKind::Sharpen => "sharpen",
            PerturbationKind::Noise => "noise",
            PerturbationKind::Whirl => "whirl",
            PerturbationKind::Pinch => "pinch",
        }
    }

    pub fn default_amount(self) -> f64 {
        match self {
            PerturbationKind::None => 0.0,
            PerturbationKind::Blur => 2.0,
            PerturbationKind::Sharpen => 1.0,
            PerturbationKind::Noise => 0.05,
            PerturbationKind::Whirl => 1.5,
            PerturbationKind::Pinch => 0.5,
        }
    }

    pub fn is_radial(self) -> bool {
        matches!(self, PerturbationKind::Whirl | PerturbationKind::Pinch)
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "orig" | "original" => Ok(PerturbationKind::None),
            "blur" => Ok(PerturbationKind::Blur),
            "sharpen" | "sharp" => Ok(PerturbationKind::Sharpen),
            "noise" => Ok(PerturbationKind::Noise),
            "whirl" => Ok(PerturbationKind::Whirl),
            "pinch" => Ok(PerturbationKind::Pinch),
            other => Err(config_err!("unknown perturbation kind '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// σ in pixels (blur), mask gain (sharpen), σ in normalized units
    /// (noise), peak rotation in radians (whirl), radial exponent (pinch).
    pub amount: f64,
    /// Affected disk radius as a fraction of half the shorter side.
    pub radius_fraction: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind) -> Self {
        PerturbationSpec {
            kind,
            amount: kind.default_amount(),
            radius_fraction: 1.0,
            seed: 0,
        }
    }

    pub fn with_amount(mut self, amount: f64) -> Self {
        self.amount = amount;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.amount.is_finite() {
            return Err(config_err!("perturbation amount must be finite"));
        }
        if !(self.radius_fraction > 0.0 && self.radius_fraction <= 1.0) {
            return Err(config_err!(
                "radius_fraction must lie in (0, 1], got {}",
                self.radius_fraction
            ));
        }
        match self.kind {
            PerturbationKind::Blur | PerturbationKind::Noise if self.amount < 0.0 => {
                Err(config_err!("{} amount must be non-negative", self.kind))
            }
            PerturbationKind::Pinch if self.amount.abs() >= 0.9 => Err(config_err!(
                "pinch amount must lie in (-0.9, 0.9), got {}",
                self.amount
            )),
            _ => Ok(()),
        }
    }
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &ImageTensor, sigma: f64) -> ImageTensor {
    if sigma <= 0.0 {
        return image.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let src = image.data();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let rows = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        k.iter()
            .enumerate()
            .map(|(t, wt)| wt * src[[ch, y, clamp(x as isize + t as isize - r, w)]])
            .sum::<f64>()
    });
    let out = Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        k.iter()
            .enumerate()
            .map(|(t, wt)| wt * rows[[ch, clamp(y as isize + t as isize - r, h), x]])
            .sum::<f64>()
    });
    ImageTensor::new(out)
}

/// Bilinear sample at a fractional position, clamped to the image.
fn bilinear(src: &Array3<f64>, ch: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = src.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = src[[ch, y0, x0]] * (1.0 - fx) + src[[ch, y0, x1]] * fx;
    let bottom = src[[ch, y1, x0]] * (1.0 - fx) + src[[ch, y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Inverse-maps every pixel inside the disk through `source`, which gets
/// the offset from the centre, the radius and the normalized radius `d`,
/// and returns the source offset. Pixels on or outside the rim are copied.
fn radial_warp(image: &ImageTensor, radius_fraction: f64, source: impl Fn(f64, f64, f64, f64) -> (f64, f64)) -> ImageTensor {
    let (c, h, w) = (image.channels(), image.height(), image.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r_max = h.min(w) as f64 / 2.0;
    let disk = radius_fraction * r_max;
    let src = image.data();
    let mut out = src.clone();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let r = dx.hypot(dy);
            if r >= disk || r == 0.0 {
                continue;
            }
            let (sy, sx) = source(dy, dx, r, r / disk);
            for ch in 0..c {
                out[[ch, y, x]] = bilinear(src, ch, cy + sy, cx + sx);
            }
        }
    }
    ImageTensor::new(out)
}

pub fn whirl(image: &ImageTensor, amount: f64, radius_fraction: f64) -> ImageTensor {
    radial_warp(image, radius_fraction, |dy, dx, r, d| {
        let theta = dy.atan2(dx) - amount * (1.0 - d) * (1.0 - d);
        (r * theta.sin(), r * theta.cos())
    })
}

pub fn pinch(image: &ImageTensor, amount: f64, radius_fraction: f64) -> ImageTensor {
    radial_warp(image, radius_fraction, |dy, dx, _, d| {
        let s = d.powf(amount);
        (dy * s, dx * s)
    })
}

pub fn add_noise(image: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, sigma).expect("validated sigma");
    let mut out = image.clone();
    out.data_mut().mapv_inplace(|v| v + dist.sample(&mut rng));
    out
}

/// Applies `spec`; the result is clamped to `[-1, 1]`. A zero amount (or
/// kind `none`) returns the input unchanged.
pub fn apply_perturbation(image: &ImageTensor, spec: &PerturbationSpec) -> Result<ImageTensor> {
    spec.validate()?;
    if spec.kind == PerturbationKind::None || spec.amount == 0.0 {
        return Ok(image.clone());
    }
    let mut out = match spec.kind {
        PerturbationKind::None => unreachable!("handled above"),
        PerturbationKind::Blur => gaussian_blur(image, spec.amount),
        PerturbationKind::Sharpen => {
            let blurred = gaussian_blur(image, SHARPEN_SIGMA);
            let mut out = image.clone();
            ndarray::Zip::from(out.data_mut())
                .and(blurred.data())
                .for_each(|o, &b| *o += spec.amount * (*o - b));
            out
        }
        PerturbationKind::Noise => add_noise(image, spec.amount, spec.seed),
        PerturbationKind::Whirl => whirl(image, spec.amount, spec.radius_fraction),
        PerturbationKind::Pinch => pinch(image, spec.amount, spec.radius_fraction),
    };
    out.data_mut().mapv_inplace(|v| v.clamp(-1.0, 1.0));
    Ok(out)
}
