//! Separable Lanczos-3 resampling and the three-level image pyramid.
//!
//! Resampling is a linear map `Y = R · X · Cᵀ` per channel, where `R` and
//! `C` are dense per-axis weight matrices. Each output sample's taps are
//! normalized to sum to one, and taps beyond the border are clamped onto the
//! edge pixel. Because the map is linear, its adjoint (`Rᵀ · G · C`) gives
//! the exact gradient used when generated angiograms are pushed through the
//! discriminator pyramid.

use ndarray::{Array2, Axis};

use crate::error::{input_err, Result};
use crate::image::ImageTensor;
use crate::nn::Tensor;

pub const LANCZOS_RADIUS: f64 = 3.0;

pub const PYRAMID_LEVELS: usize = 3;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// `sinc(x)·sinc(x/a)` on `|x| < a`, zero elsewhere.
pub fn lanczos(x: f64, a: f64) -> f64 {
    if x.abs() >= a {
        0.0
    } else {
        sinc(x) * sinc(x / a)
    }
}

/// Dense `output × input` weights resampling one axis.
pub fn axis_weights(input: usize, output: usize) -> Array2<f64> {
    let scale = input as f64 / output as f64;
    let filter_scale = scale.max(1.0);
    let support = LANCZOS_RADIUS * filter_scale;
    let mut m = Array2::zeros((output, input));
    for i in 0..output {
        let center = (i as f64 + 0.5) * scale - 0.5;
        let lo = (center - support).floor() as isize;
        let hi = (center + support).ceil() as isize;
        let mut total = 0.0;
        for j in lo..=hi {
            let w = lanczos((j as f64 - center) / filter_scale, LANCZOS_RADIUS);
            if w == 0.0 {
                continue;
            }
            let src = j.clamp(0, input as isize - 1) as usize;
            m[[i, src]] += w;
            total += w;
        }
        m.row_mut(i).mapv_inplace(|w| w / total);
    }
    m
}

/// A fixed-size resampling operator.
#[derive(Debug, Clone)]
pub struct Resampler {
    rows: Array2<f64>,
    cols: Array2<f64>,
}

impl Resampler {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Resampler {
            rows: axis_weights(in_h, out_h),
            cols: axis_weights(in_w, out_w),
        }
    }

    /// 2× downsampling of an `h×w` image.
    pub fn halving(h: usize, w: usize) -> Self {
        Self::new(h, w, h / 2, w / 2)
    }

    pub fn input_dims(&self) -> (usize, usize) {
        (self.rows.ncols(), self.cols.ncols())
    }

    pub fn output_dims(&self) -> (usize, usize) {
        (self.rows.nrows(), self.cols.nrows())
    }

    fn check(&self, h: usize, w: usize, expect: (usize, usize)) -> Result<()> {
        if (h, w) != expect {
            return Err(input_err!(
                "resampler built for {}×{} got {h}×{w}",
                expect.0,
                expect.1
            ));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dim();
        self.check(h, w, self.input_dims())?;
        let (oh, ow) = self.output_dims();
        let mut out = Tensor::zeros((n, c, oh, ow));
        for b in 0..n {
            for ch in 0..c {
                let plane = x.slice(ndarray::s![b, ch, .., ..]);
                let y = self.rows.dot(&plane).dot(&self.cols.t());
                out.slice_mut(ndarray::s![b, ch, .., ..]).assign(&y);
            }
        }
        Ok(out)
    }

    /// Adjoint map: gradient w.r.t. the input given the gradient w.r.t. the output.
    pub fn adjoint(&self, grad: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = grad.dim();
        self.check(h, w, self.output_dims())?;
        let (ih, iw) = self.input_dims();
        let mut out = Tensor::zeros((n, c, ih, iw));
        for b in 0..n {
            for ch in 0..c {
                let plane = grad.slice(ndarray::s![b, ch, .., ..]);
                let y = self.rows.t().dot(&plane).dot(&self.cols);
                out.slice_mut(ndarray::s![b, ch, .., ..]).assign(&y);
            }
        }
        Ok(out)
    }

    pub fn apply_image(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let out = self.apply(&image.to_batch())?;
        Ok(ImageTensor::new(out.index_axis_move(Axis(0), 0)))
    }
}

/// Lanczos resize of a single image to `out_h × out_w`.
pub fn resize(image: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    Resampler::new(image.height(), image.width(), out_h, out_w).apply_image(image)
}

/// 2× Lanczos downsampling of a single image.
pub fn downsample2(image: &ImageTensor) -> Result<ImageTensor> {
    if !image.height().is_multiple_of(2) || !image.width().is_multiple_of(2) {
        return Err(input_err!(
            "cannot halve a {}×{} image",
            image.height(),
            image.width()
        ));
    }
    Resampler::halving(image.height(), image.width()).apply_image(image)
}

/// Original, 2× and 4× downsampled copies of one image. Each level is the
/// previous one halved, so re-pyramiding level 1 reproduces level 2 exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePyramid {
    pub levels: Vec<ImageTensor>,
}

pub fn build_pyramid(image: &ImageTensor) -> Result<ImagePyramid> {
    check_pyramid_dims(image.height(), image.width())?;
    let mut levels = vec![image.clone()];
    for _ in 1..PYRAMID_LEVELS {
        let next = downsample2(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(ImagePyramid { levels })
}

fn check_pyramid_dims(h: usize, w: usize) -> Result<()> {
    let f = 1 << (PYRAMID_LEVELS - 1);
    if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
        return Err(input_err!(
            "a {PYRAMID_LEVELS}-level pyramid needs dimensions divisible by {f}, got {h}×{w}"
        ));
    }
    Ok(())
}

/// Pyramid over a whole batch, with the halving operators kept for backprop.
#[derive(Debug, Clone)]
pub struct BatchPyramid {
    pub levels: Vec<Tensor>,
}

impl BatchPyramid {
    pub fn build(x: &Tensor) -> Result<Self> {
        let (_, _, h, w) = x.dim();
        check_pyramid_dims(h, w)?;
        let mut levels = vec![x.clone()];
        for _ in 1..PYRAMID_LEVELS {
            let prev = levels.last().expect("non-empty");
            let (_, _, ph, pw) = prev.dim();
            let next = Resampler::halving(ph, pw).apply(prev)?;
            levels.push(next);
        }
        Ok(BatchPyramid { levels })
    }
}
