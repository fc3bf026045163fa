//! Image tensors in `[−1, 1]` and their 8-bit on-disk counterparts.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{s, Array3, Axis};

use crate::error::{input_err, Error, Result};
use crate::nn::Tensor;

/// A `C×H×W` image with values in `[−1, 1]`. Fundus images carry three
/// channels, angiograms one.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(Array3<f64>);

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Self {
        ImageTensor(data)
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageTensor(Array3::zeros((channels, height, width)))
    }

    pub fn from_elem(channels: usize, height: usize, width: usize, v: f64) -> Self {
        ImageTensor(Array3::from_elem((channels, height, width), v))
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    /// A one-image batch `1×C×H×W`.
    pub fn to_batch(&self) -> Tensor {
        self.0.clone().insert_axis(Axis(0))
    }

    pub fn from_batch(batch: &Tensor, index: usize) -> Self {
        ImageTensor(batch.index_axis(Axis(0), index).to_owned())
    }

    /// Stacks same-shaped images into an `N×C×H×W` batch.
    pub fn stack(images: &[&ImageTensor]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| input_err!("cannot stack zero images"))?;
        let dim = first.0.dim();
        if let Some(bad) = images.iter().find(|im| im.0.dim() != dim) {
            return Err(input_err!(
                "cannot stack a {:?} image with {:?}",
                bad.0.dim(),
                dim
            ));
        }
        let views: Vec<_> = images.iter().map(|im| im.0.view()).collect();
        Ok(ndarray::stack(Axis(0), &views).expect("shapes checked"))
    }

    /// Window of `size`×`size` whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height() || col + width > self.width() {
            return Err(input_err!(
                "{height}×{width} crop at ({row}, {col}) exceeds {}×{} image",
                self.height(),
                self.width()
            ));
        }
        Ok(ImageTensor(
            self.0
                .slice(s![.., row..row + height, col..col + width])
                .to_owned(),
        ))
    }

    /// Channel-averaged single-channel copy.
    pub fn to_gray(&self) -> Self {
        let c = self.channels() as f64;
        ImageTensor(self.0.sum_axis(Axis(0)).mapv(|v| v / c).insert_axis(Axis(0)))
    }

    pub fn max_abs(&self) -> f64 {
        self.0.fold(0.0f64, |a, &v| a.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.0.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    /// Decodes an image file into `channels` (1 or 3) normalized channels.
    /// Colour sources loaded as one channel are averaged across channels.
    pub fn load(path: &Path, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(&img, channels)
    }

    pub fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Self> {
        let rgb = img.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        match channels {
            3 => Ok(ImageTensor(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
                normalize(rgb.get_pixel(x as u32, y as u32)[c])
            }))),
            1 => {
                let native_gray = matches!(
                    img,
                    DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_)
                );
                if native_gray {
                    let g = img.to_luma8();
                    Ok(ImageTensor(Array3::from_shape_fn((1, h, w), |(_, y, x)| {
                        normalize(g.get_pixel(x as u32, y as u32)[0])
                    })))
                } else {
                    Ok(ImageTensor(Array3::from_shape_fn((1, h, w), |(_, y, x)| {
                        let p = rgb.get_pixel(x as u32, y as u32);
                        (normalize(p[0]) + normalize(p[1]) + normalize(p[2])) / 3.0
                    })))
                }
            }
            _ => Err(input_err!("images have 1 or 3 channels, not {channels}")),
        }
    }

    pub fn to_dynamic(&self) -> Result<DynamicImage> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        match self.channels() {
            1 => Ok(DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| {
                image::Luma([denormalize(self.0[[0, y as usize, x as usize]])])
            }))),
            3 => Ok(DynamicImage::ImageRgb8(RgbImage::from_fn(w, h, |x, y| {
                let px = |c| denormalize(self.0[[c, y as usize, x as usize]]);
                image::Rgb([px(0), px(1), px(2)])
            }))),
            c => Err(input_err!("cannot encode a {c}-channel image")),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_dynamic()?.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Maps an 8-bit value linearly onto `[−1, 1]`.
pub fn normalize(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

/// Rounded inverse of [`normalize`], saturating outside `[−1, 1]`.
pub fn denormalize(t: f64) -> u8 {
    ((t + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
        assert!((normalize(128) - (128.0 / 127.5 - 1.0)).abs() < 1e-15);
        assert!((normalize(128) - 0.003_921_568_627_450_98).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trips_on_the_8bit_lattice() {
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v)), v);
        }
    }

    #[test]
    fn crop_bounds() {
        let img = ImageTensor::zeros(3, 10, 12);
        assert_eq!(img.crop(2, 4, 8, 8).unwrap().height(), 8);
        assert!(img.crop(3, 0, 8, 8).is_err());
    }
}
