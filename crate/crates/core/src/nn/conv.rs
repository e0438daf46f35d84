//! Strided 2-D convolution and transposed convolution on single `(C, H, W)` samples.
//!
//! Both layers are lowered to a matrix product through an im2col buffer. The
//! column buffer of the forward pass is kept in the cache and reused by the
//! backward pass.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::NnError;

/// Output extent of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    if input == 0 || stride == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * padding).filter(|&n| n > 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

/// Gathers `(C*k*k, out_h*out_w)` patches from `x`.
fn im2col(x: ArrayView3<f64>, g: &Geometry) -> Array2<f64> {
    let k = g.kernel;
    let n_out = g.out_h * g.out_w;
    let mut cols = Array2::<f64>::zeros((g.channels * k * k, n_out));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("fresh array");
    for c in 0..g.channels {
        let plane = &xs[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cs[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back onto a `(C, H, W)` grid.
fn col2im(cols: &Array2<f64>, g: &Geometry) -> Array3<f64> {
    let k = g.kernel;
    let n_out = g.out_h * g.out_w;
    let mut x = Array3::<f64>::zeros((g.channels, g.height, g.width));
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("fresh array");
    for c in 0..g.channels {
        let plane = &mut xs[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cs[row * n_out..(row + 1) * n_out];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

fn kaiming<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), fan_in: f64) -> Array2<f64> {
    let std = (2.0 / fan_in.max(1.0)).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn(shape, || normal.sample(rng))
}

/// Forward-pass state needed by the backward pass of either convolution kind.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

/// `Conv(in, out, kernel, stride, padding)` with a per-channel bias.
///
/// The weight is stored as `(out, in*k*k)`, i.e. the row-major flattening of
/// the usual `(out, in, k, k)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
        }
    }

    /// Kaiming-normal weights scaled by fan-in, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let fan_in = (in_channels * kernel * kernel) as f64;
        conv.weight = kaiming(rng, conv.weight.dim(), fan_in);
        conv
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_shape(&self, height: usize, width: usize) -> Option<(usize, usize, usize)> {
        Some((
            self.out_channels,
            conv_out_len(height, self.kernel, self.stride, self.padding)?,
            conv_out_len(width, self.kernel, self.stride, self.padding)?,
        ))
    }

    fn geometry(&self, x: &ArrayView3<f64>) -> Result<Geometry, NnError> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(NnError::ChannelMismatch { expected: self.in_channels, got: c });
        }
        let (_, out_h, out_w) = self
            .output_shape(h, w)
            .ok_or(NnError::SpatialTooSmall { height: h, width: w, kernel: self.kernel })?;
        Ok(Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_h,
            out_w,
        })
    }

    pub fn forward(&self, x: ArrayView3<f64>) -> Result<(Array3<f64>, ConvCache), NnError> {
        let g = self.geometry(&x)?;
        let cols = im2col(x, &g);
        let mut y = self.weight.dot(&cols);
        for (mut row, b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += *b;
        }
        let y = y
            .into_shape_with_order((self.out_channels, g.out_h, g.out_w))
            .expect("conv output reshape");
        Ok((y, ConvCache { cols, in_shape: (g.channels, g.height, g.width) }))
    }

    /// Backpropagates `dy`; accumulates parameter gradients into `grad` when given.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: ArrayView3<f64>,
        grad: Option<&mut Conv2d>,
    ) -> Array3<f64> {
        let (c, h, w) = cache.in_shape;
        let (co, oh, ow) = dy.dim();
        let dy2 = dy
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((co, oh * ow))
            .expect("dy reshape");
        if let Some(grad) = grad {
            grad.weight += &dy2.dot(&cache.cols.t());
            grad.bias += &dy2.sum_axis(Axis(1));
        }
        let dcols = self.weight.t().dot(&dy2);
        let g = Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            out_h: oh,
            out_w: ow,
        };
        col2im(&dcols, &g)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let shape = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        f(&format!("{prefix}.weight"), &shape, self.weight.as_slice().expect("standard"));
        f(&format!("{prefix}.bias"), &[self.out_channels], self.bias.as_slice().expect("standard"));
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), self.weight.as_slice_mut().expect("standard"));
        f(&format!("{prefix}.bias"), self.bias.as_slice_mut().expect("standard"));
    }
}

/// `ConvTran(in, out, kernel, stride, padding)`: the adjoint of a strided convolution.
///
/// The weight is stored as `(in, out*k*k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvTranspose2d {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Array2::zeros((in_channels, out_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
        }
    }

    /// Kaiming-normal weights using the effective fan-in `in*k*k/stride²`.
    pub fn kaiming<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let mut conv = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let fan_in = (in_channels * kernel * kernel) as f64 / (stride * stride) as f64;
        conv.weight = kaiming(rng, conv.weight.dim(), fan_in);
        conv
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_shape(&self, height: usize, width: usize) -> Option<(usize, usize, usize)> {
        Some((
            self.out_channels,
            conv_transpose_out_len(height, self.kernel, self.stride, self.padding)?,
            conv_transpose_out_len(width, self.kernel, self.stride, self.padding)?,
        ))
    }

    // Geometry of the equivalent forward convolution running from output to input.
    fn geometry(&self, h: usize, w: usize) -> Result<Geometry, NnError> {
        let (_, oh, ow) = self
            .output_shape(h, w)
            .ok_or(NnError::SpatialTooSmall { height: h, width: w, kernel: self.kernel })?;
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

    pub fn forward(&self, x: ArrayView3<f64>) -> Result<(Array3<f64>, ConvCache), NnError> {
        let (c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(NnError::ChannelMismatch { expected: self.in_channels, got: c });
        }
        let g = self.geometry(h, w)?;
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h * w))
            .expect("x reshape");
        let cols = self.weight.t().dot(&x2);
        let mut y = col2im(&cols, &g);
        for (mut plane, b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            plane += *b;
        }
        Ok((y, ConvCache { cols: x2, in_shape: (c, h, w) }))
    }

    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: ArrayView3<f64>,
        grad: Option<&mut ConvTranspose2d>,
    ) -> Array3<f64> {
        let (c, h, w) = cache.in_shape;
        let g = self.geometry(h, w).expect("geometry validated in forward");
        let dcols = im2col(dy, &g);
        if let Some(grad) = grad {
            grad.weight += &cache.cols.dot(&dcols.t());
            grad.bias += &dy.sum_axis(Axis(2)).sum_axis(Axis(1));
        }
        self.weight
            .dot(&dcols)
            .into_shape_with_order((c, h, w))
            .expect("dx reshape")
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let shape = [self.in_channels, self.out_channels, self.kernel, self.kernel];
        f(&format!("{prefix}.weight"), &shape, self.weight.as_slice().expect("standard"));
        f(&format!("{prefix}.bias"), &[self.out_channels], self.bias.as_slice().expect("standard"));
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}.weight"), self.weight.as_slice_mut().expect("standard"));
        f(&format!("{prefix}.bias"), self.bias.as_slice_mut().expect("standard"));
    }
}

/// Concatenates two feature maps along the channel axis.
pub fn concat_channels<'a>(a: ArrayView3<'a, f64>, b: ArrayView3<'a, f64>) -> Array3<f64> {
    ndarray::concatenate(Axis(0), &[a, b]).expect("matching spatial dims")
}

/// Splits a feature map into its first `n` channels and the rest.
pub fn split_channels(x: &Array3<f64>, n: usize) -> (Array3<f64>, Array3<f64>) {
    (x.slice(s![..n, .., ..]).to_owned(), x.slice(s![n.., .., ..]).to_owned())
}
