use ndarray::{
    linalg::general_mat_mul, s, Array2, Array4, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix4, ShapeBuilder,
};
use std::ops::Range;

use rand::Rng;

use super::{join, missing_cache, normal_array, Mode, Module, Param, Slot, Tensor};
use crate::error::{config_err, input_err, Result};

/// Sliding-window geometry shared by convolution and its transpose.
///
/// Window `(oy, ox)` with tap `(ky, kx)` reads image pixel
/// `(oy·stride + ky − padding, ox·stride + kx − padding)`; taps that fall
/// outside the image read zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn conv(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if height + 2 * padding < kernel || width + 2 * padding < kernel || stride == 0 {
            return None;
        }
        Some(Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Output-row bands sized so one unfolded band stays around a megabyte.
    fn bands(&self) -> impl Iterator<Item = Range<usize>> {
        const BAND_ELEMENTS: usize = 1 << 17;
        let step = (BAND_ELEMENTS / (self.rows() * self.out_w).max(1)).max(1);
        let h = self.out_h;
        (0..h).step_by(step).map(move |lo| lo..(lo + step).min(h))
    }

    fn band_cols(&self, band: &Range<usize>) -> Range<usize> {
        band.start * self.out_w..band.end * self.out_w
    }

    fn is_unpadded_unit_stride(&self) -> bool {
        self.stride == 1 && self.padding == 0
    }

    fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `[lo, hi)` whose tap `kx` lands inside the image (stride 1 only).
    fn unit_stride_span(&self, kx: usize) -> (usize, usize) {
        let lo = self.padding.saturating_sub(kx);
        let hi = self.out_w.min((self.width + self.padding).saturating_sub(kx));
        (lo, hi)
    }

    fn source_row(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + k).checked_sub(self.padding)?;
        (i < limit).then_some(i)
    }
}

/// Unfolds a `C×H×W` image (row-major slice) into a `(C·K·K)×(OH·OW)` matrix.
pub fn im2col(x: &[f64], g: &Geometry) -> Array2<f64> {
    im2col_rows(x, g, 0..g.out_h)
}

/// [`im2col`] restricted to output rows `band`; columns cover `band.len()·OW` windows.
pub fn im2col_rows(x: &[f64], g: &Geometry, band: Range<usize>) -> Array2<f64> {
    let (k, hw) = (g.kernel, g.height * g.width);
    let plane = band.len() * g.out_w;
    debug_assert_eq!(x.len(), g.channels * hw);
    let mut cols = vec![0.0; g.rows() * plane];
    for c in 0..g.channels {
        let xc = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for (r, oy) in band.clone().enumerate() {
                    let Some(iy) = g.source_row(oy, ky, g.height) else {
                        continue;
                    };
                    let src = &xc[iy * g.width..(iy + 1) * g.width];
                    let drow = &mut dst[r * g.out_w..(r + 1) * g.out_w];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kx);
                        if lo < hi {
                            let off = kx + lo - g.padding;
                            drow[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(ix) = g.source_row(ox, kx, g.width) {
                                *d = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((g.rows(), plane), cols).expect("sized above")
}

/// Adjoint of [`im2col`]: scatters columns back onto a `C×H×W` image, accumulating.
pub fn col2im(cols: ArrayView2<'_, f64>, g: &Geometry, out: &mut [f64]) {
    col2im_rows(cols, g, 0..g.out_h, out)
}

/// Adjoint of [`im2col_rows`].
pub fn col2im_rows(cols: ArrayView2<'_, f64>, g: &Geometry, band: Range<usize>, out: &mut [f64]) {
    let (k, hw) = (g.kernel, g.height * g.width);
    let plane = band.len() * g.out_w;
    debug_assert_eq!(out.len(), g.channels * hw);
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().expect("standard layout");
    for c in 0..g.channels {
        let oc = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for (r, oy) in band.clone().enumerate() {
                    let Some(iy) = g.source_row(oy, ky, g.height) else {
                        continue;
                    };
                    let dst = &mut oc[iy * g.width..(iy + 1) * g.width];
                    let srow = &src[r * g.out_w..(r + 1) * g.out_w];
                    if g.stride == 1 {
                        let (lo, hi) = g.unit_stride_span(kx);
                        if lo < hi {
                            let off = kx + lo - g.padding;
                            for (d, s) in dst[off..off + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                                *d += s;
                            }
                        }
                    } else {
                        for (ox, s) in srow.iter().enumerate() {
                            if let Some(ix) = g.source_row(ox, kx, g.width) {
                                dst[ix] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unpadded stride-1 convolution without unfolding: each tap is one GEMM of
/// a weight slice against a shifted view of the flattened input. Outputs are
/// computed on an `OH×W` grid whose last `K−1` columns per row are discarded.
fn shifted_forward(w: &ArrayD<f64>, x: &[f64], g: &Geometry, out: &mut ArrayViewMut2<'_, f64>) {
    let w = w.view().into_dimensionality::<Ix4>().expect("4-d weight");
    let (hw, wd, k) = (g.height * g.width, g.width, g.kernel);
    let span = (g.out_h - 1) * wd + g.out_w;
    let mut full = Array2::<f64>::zeros((w.dim().0, span));
    for ky in 0..k {
        for kx in 0..k {
            let a = w.slice(s![.., .., ky, kx]);
            let b = ArrayView2::from_shape((g.channels, span).strides((hw, 1)), &x[ky * wd + kx..])
                .expect("shifted view stays in bounds");
            general_mat_mul(1.0, &a, &b, 1.0, &mut full);
        }
    }
    for oy in 0..g.out_h {
        out.slice_mut(s![.., oy * g.out_w..(oy + 1) * g.out_w])
            .assign(&full.slice(s![.., oy * wd..oy * wd + g.out_w]));
    }
}

/// Unpadded stride-1 convolution as plain row-wise multiply-adds, for layers
/// with very few output channels where a GEMM would degenerate to a vector product.
fn direct_forward(w: &ArrayD<f64>, x: &[f64], g: &Geometry, out: &mut ArrayViewMut2<'_, f64>) {
    let w = w.view().into_dimensionality::<Ix4>().expect("4-d weight");
    let (hw, wd, k, ow) = (g.height * g.width, g.width, g.kernel, g.out_w);
    let mut row = vec![0.0; ow];
    for co in 0..w.dim().0 {
        for oy in 0..g.out_h {
            row.fill(0.0);
            for ci in 0..g.channels {
                for ky in 0..k {
                    let start = ci * hw + (oy + ky) * wd;
                    for kx in 0..k {
                        let t = w[[co, ci, ky, kx]];
                        for (o, v) in row.iter_mut().zip(&x[start + kx..start + kx + ow]) {
                            *o += t * v;
                        }
                    }
                }
            }
            out.slice_mut(s![co, oy * ow..(oy + 1) * ow])
                .assign(&ndarray::ArrayView1::from(&row[..]));
        }
    }
}

/// Backward of [`shifted_forward`]; accumulates into `dw` and `dx`.
fn shifted_backward(
    w: &ArrayD<f64>,
    x: &[f64],
    grad: ArrayView2<'_, f64>,
    g: &Geometry,
    dw: &mut ArrayD<f64>,
    dx: &mut [f64],
) {
    let w = w.view().into_dimensionality::<Ix4>().expect("4-d weight");
    let mut dw = dw.view_mut().into_dimensionality::<Ix4>().expect("4-d weight");
    let (hw, wd, k) = (g.height * g.width, g.width, g.kernel);
    let span = (g.out_h - 1) * wd + g.out_w;
    let mut full = Array2::<f64>::zeros((w.dim().0, span));
    for oy in 0..g.out_h {
        full.slice_mut(s![.., oy * wd..oy * wd + g.out_w])
            .assign(&grad.slice(s![.., oy * g.out_w..(oy + 1) * g.out_w]));
    }
    for ky in 0..k {
        for kx in 0..k {
            let off = ky * wd + kx;
            let a = w.slice(s![.., .., ky, kx]);
            let b = ArrayView2::from_shape((g.channels, span).strides((hw, 1)), &x[off..])
                .expect("shifted view stays in bounds");
            let mut dwk = dw.slice_mut(s![.., .., ky, kx]);
            general_mat_mul(1.0, &full, &b.t(), 1.0, &mut dwk);
            let mut db = ArrayViewMut2::from_shape((g.channels, span).strides((hw, 1)), &mut dx[off..])
                .expect("shifted view stays in bounds");
            general_mat_mul(1.0, &a.t(), &full, 1.0, &mut db);
        }
    }
}

fn add_bias(out: &mut Tensor, bias: &Param) {
    for (c, b) in bias.value.iter().enumerate() {
        out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + b);
    }
}

fn accumulate_bias_grad(bias: &mut Param, grad: &Tensor) {
    for (c, g) in bias.grad.iter_mut().enumerate() {
        *g += grad.index_axis(Axis(1), c).sum();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    Unfold,
    Shifted,
    Direct,
}

/// Plain 2-D convolution with zero padding.
pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    weight: Param,
    bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Conv2d {
    /// Weights drawn from N(0, std²); bias (if any) starts at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
        std: f64,
    ) -> Self {
        let weight = Param::new(normal_array(
            rng,
            &[out_channels, in_channels, kernel, kernel],
            std,
        ));
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: bias.then(|| Param::new(ndarray::ArrayD::zeros(vec![out_channels]))),
            cache: None,
        }
    }

    pub fn weight(&self) -> &Param {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Param {
        &mut self.weight
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(config_err!(
                "convolution expects {} input channels, got {c}",
                self.in_channels
            ));
        }
        Geometry::conv(c, h, w, self.kernel, self.stride, self.padding).ok_or_else(|| {
            input_err!(
                "{h}×{w} input is smaller than the {}×{} kernel",
                self.kernel,
                self.kernel
            )
        })
    }

    fn route(&self, g: &Geometry) -> Route {
        if !g.is_unpadded_unit_stride() {
            Route::Unfold
        } else if self.out_channels <= 4 {
            Route::Direct
        } else if self.in_channels >= 16 {
            Route::Shifted
        } else {
            Route::Unfold
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, self.in_channels * self.kernel * self.kernel))
            .expect("contiguous weight")
    }
}

impl Module for Conv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let x = x.as_standard_layout();
        let n = x.dim().0;
        let wmat = self.weight_matrix();
        let mut out = Array4::zeros((n, self.out_channels, g.out_h, g.out_w));
        for i in 0..n {
            let xi = x.index_axis(Axis(0), i);
            let xs = xi.as_slice().expect("standard layout");
            let mut oi = out
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.out_channels, g.plane()))
                .expect("contiguous output");
            if self.route(&g) == Route::Direct {
                direct_forward(&self.weight.value, xs, &g, &mut oi);
            } else if self.route(&g) == Route::Shifted {
                shifted_forward(&self.weight.value, xs, &g, &mut oi);
            } else {
                for band in g.bands() {
                    let cols = im2col_rows(xs, &g, band.clone());
                    let mut ob = oi.slice_mut(s![.., g.band_cols(&band)]);
                    general_mat_mul(1.0, &wmat, &cols, 0.0, &mut ob);
                }
            }
        }
        if let Some(b) = &self.bias {
            add_bias(&mut out, b);
        }
        self.cache = mode.caches().then(|| x.into_owned());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let g = self.geometry(x)?;
        let grad = grad.as_standard_layout();
        let rows = self.in_channels * self.kernel * self.kernel;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, rows))
            .expect("contiguous weight")
            .to_owned();
        let mut dw = Array2::<f64>::zeros((self.out_channels, rows));
        let mut dx = Tensor::zeros(x.raw_dim());
        for i in 0..x.dim().0 {
            let xi = x.index_axis(Axis(0), i);
            let xs = xi.as_slice().expect("cached standard layout");
            let gi = grad
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.out_channels, g.plane()))
                .expect("contiguous grad");
            let mut dxi = dx.index_axis_mut(Axis(0), i);
            let dxs = dxi.as_slice_mut().expect("fresh array");
            if self.route(&g) != Route::Unfold {
                shifted_backward(&self.weight.value, xs, gi, &g, &mut self.weight.grad, dxs);
                continue;
            }
            for band in g.bands() {
                let cols = im2col_rows(xs, &g, band.clone());
                let gb = gi.slice(s![.., g.band_cols(&band)]);
                general_mat_mul(1.0, &gb, &cols.t(), 1.0, &mut dw);
                let dcols = wmat.t().dot(&gb);
                col2im_rows(dcols.view(), &g, band, dxs);
            }
        }
        let dw = dw.into_shape_with_order(self.weight.grad.raw_dim()).expect("same size");
        self.weight.grad += &dw;
        if let Some(b) = &mut self.bias {
            accumulate_bias_grad(b, &grad.to_owned());
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param(b));
        }
    }
}

/// Transposed convolution (fractionally strided), weight laid out `Cin×Cout×K×K`.
pub struct ConvTranspose2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
    weight: Param,
    cache: Option<Tensor>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut impl Rng,
        std: f64,
    ) -> Self {
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight: Param::new(normal_array(
                rng,
                &[in_channels, out_channels, kernel, kernel],
                std,
            )),
            cache: None,
        }
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(config_err!(
                "transposed convolution expects {} input channels, got {c}",
                self.in_channels
            ));
        }
        let grow = |d: usize| {
            ((d.max(1) - 1) * self.stride + self.kernel + self.output_padding)
                .checked_sub(2 * self.padding)
                .filter(|_| d > 0)
                .ok_or_else(|| input_err!("transposed convolution input has zero extent"))
        };
        let (oh, ow) = (grow(h)?, grow(w)?);
        Ok(Geometry {
            channels: self.out_channels,
            height: oh,
            width: ow,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_h: h,
            out_w: w,
        })
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.in_channels, self.out_channels * self.kernel * self.kernel))
            .expect("contiguous weight")
    }
}

impl Module for ConvTranspose2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let x = x.as_standard_layout();
        let n = x.dim().0;
        let wmat = self.weight_matrix();
        let mut out = Tensor::zeros((n, self.out_channels, g.height, g.width));
        for i in 0..n {
            let xi = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.in_channels, g.plane()))
                .expect("contiguous input");
            let mut oi = out.index_axis_mut(Axis(0), i);
            let os = oi.as_slice_mut().expect("fresh array");
            for band in g.bands() {
                let cols = wmat.t().dot(&xi.slice(s![.., g.band_cols(&band)]));
                col2im_rows(cols.view(), &g, band, os);
            }
        }
        self.cache = mode.caches().then(|| x.into_owned());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache("conv_transpose2d"))?;
        let g = self.geometry(x)?;
        let grad = grad.as_standard_layout();
        let wmat = self.weight_matrix().to_owned();
        let mut dw = Array2::<f64>::zeros(wmat.raw_dim());
        let mut dx = Tensor::zeros(x.raw_dim());
        for i in 0..x.dim().0 {
            let gi = grad.index_axis(Axis(0), i);
            let gs = gi.as_slice().expect("standard layout");
            let xi = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((self.in_channels, g.plane()))
                .expect("contiguous input");
            let mut dxi = dx
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.in_channels, g.plane()))
                .expect("contiguous");
            for band in g.bands() {
                let dcols = im2col_rows(gs, &g, band.clone());
                let cb = g.band_cols(&band);
                general_mat_mul(1.0, &xi.slice(s![.., cb.clone()]), &dcols.t(), 1.0, &mut dw);
                let mut db = dxi.slice_mut(s![.., cb]);
                general_mat_mul(1.0, &wmat, &dcols, 0.0, &mut db);
            }
        }
        let dw = dw.into_shape_with_order(self.weight.grad.raw_dim()).expect("same size");
        self.weight.grad += &dw;
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
    }
}

/// Per-channel K×K convolution (one filter per channel, stride 1), weight `C×1×K×K`.
pub struct DepthwiseConv2d {
    channels: usize,
    kernel: usize,
    padding: usize,
    weight: Param,
    cache: Option<Tensor>,
}

impl DepthwiseConv2d {
    pub fn new(
        channels: usize,
        kernel: usize,
        padding: usize,
        rng: &mut impl Rng,
        std: f64,
    ) -> Self {
        DepthwiseConv2d {
            channels,
            kernel,
            padding,
            weight: Param::new(normal_array(rng, &[channels, 1, kernel, kernel], std)),
            cache: None,
        }
    }

    pub fn weight_mut(&mut self) -> &mut Param {
        &mut self.weight
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        let (_, c, h, w) = x.dim();
        if c != self.channels {
            return Err(config_err!(
                "depthwise convolution expects {} channels, got {c}",
                self.channels
            ));
        }
        Geometry::conv(1, h, w, self.kernel, 1, self.padding)
            .ok_or_else(|| input_err!("{h}×{w} input is smaller than the kernel"))
    }

    fn taps(&self, c: usize) -> Vec<f64> {
        self.weight
            .value
            .index_axis(Axis(0), c)
            .iter()
            .copied()
            .collect()
    }
}

impl Module for DepthwiseConv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let x = x.as_standard_layout();
        let n = x.dim().0;
        let (k, wd, ow) = (self.kernel, g.width, g.out_w);
        let mut out = Tensor::zeros((n, self.channels, g.out_h, g.out_w));
        for i in 0..n {
            for c in 0..self.channels {
                let taps = self.taps(c);
                let xc = x.slice(s![i, c, .., ..]);
                let xs = xc.as_slice().expect("standard layout");
                let mut oc = out.slice_mut(s![i, c, .., ..]);
                let os = oc.as_slice_mut().expect("fresh array");
                for oy in 0..g.out_h {
                    let orow = &mut os[oy * ow..(oy + 1) * ow];
                    for ky in 0..k {
                        let Some(iy) = g.source_row(oy, ky, g.height) else {
                            continue;
                        };
                        let xrow = &xs[iy * wd..(iy + 1) * wd];
                        for kx in 0..k {
                            let (lo, hi) = g.unit_stride_span(kx);
                            if lo >= hi {
                                continue;
                            }
                            let t = taps[ky * k + kx];
                            let off = kx + lo - g.padding;
                            for (o, v) in orow[lo..hi].iter_mut().zip(&xrow[off..off + hi - lo]) {
                                *o += t * v;
                            }
                        }
                    }
                }
            }
        }
        self.cache = mode.caches().then(|| x.into_owned());
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .as_ref()
            .ok_or_else(|| missing_cache("depthwise_conv2d"))?;
        let g = self.geometry(x)?;
        let grad = grad.as_standard_layout();
        let mut dx = Tensor::zeros(x.raw_dim());
        let (k, wd, ow) = (self.kernel, g.width, g.out_w);
        for i in 0..x.dim().0 {
            for c in 0..self.channels {
                let taps = self.taps(c);
                let mut dtaps = vec![0.0; k * k];
                let xc = x.slice(s![i, c, .., ..]);
                let xs = xc.as_slice().expect("standard layout");
                let gc = grad.slice(s![i, c, .., ..]);
                let gs = gc.as_slice().expect("standard layout");
                let mut dxc = dx.slice_mut(s![i, c, .., ..]);
                let dxs = dxc.as_slice_mut().expect("fresh array");
                for oy in 0..g.out_h {
                    let grow = &gs[oy * ow..(oy + 1) * ow];
                    for ky in 0..k {
                        let Some(iy) = g.source_row(oy, ky, g.height) else {
                            continue;
                        };
                        for kx in 0..k {
                            let (lo, hi) = g.unit_stride_span(kx);
                            if lo >= hi {
                                continue;
                            }
                            let off = iy * wd + kx + lo - g.padding;
                            let xrow = &xs[off..off + hi - lo];
                            let t = taps[ky * k + kx];
                            let mut acc = 0.0;
                            for (gv, xv) in grow[lo..hi].iter().zip(xrow) {
                                acc += gv * xv;
                            }
                            dtaps[ky * k + kx] += acc;
                            for (d, gv) in dxs[off..off + hi - lo].iter_mut().zip(&grow[lo..hi]) {
                                *d += t * gv;
                            }
                        }
                    }
                }
                let mut wg = self.weight.grad.index_axis_mut(Axis(0), c);
                for (w, d) in wg.iter_mut().zip(&dtaps) {
                    *w += d;
                }
            }
        }
        Ok(dx)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
    }
}
