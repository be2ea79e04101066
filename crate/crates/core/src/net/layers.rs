//! Dense building blocks with explicit forward caches and backward passes.
//!
//! Feature maps are token-major: an `(H·W, C)` matrix with pixels in
//! row-major order, so linear layers and convolutions (via im2col) reduce to
//! matrix products.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ParamTensors;
use super::TensorMut;
use super::TensorRef;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    /// `(height·width, channels)`.
    pub data: Array2<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(height: usize, width: usize, data: Array2<T>) -> Self {
        assert_eq!(data.nrows(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

pub(crate) fn trunc_normal<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize),
    std: f64,
) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            return T::of(v);
        }
    })
}

pub(crate) fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize),
    fan_in: usize,
) -> Array2<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_simple_fn(shape, || T::of(dist.sample(rng)))
}

fn add_bias<T: Scalar>(y: &mut Array2<T>, bias: &Array1<T>) {
    for mut row in y.rows_mut() {
        row += bias;
    }
}

/// Fully connected layer `y = x·W + b` with `W` shaped `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn forward(&self, x: &ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        add_bias(&mut y, &self.bias);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<'_, T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        ndarray::linalg::general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad.weight);
        for row in dy.rows() {
            grad.bias += &row;
        }
        dy.dot(&self.weight.t())
    }
}

impl<T: Scalar> ParamTensors<T> for Linear<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push(TensorRef::new(format!("{prefix}.weight"), &self.weight));
        out.push(TensorRef::new(format!("{prefix}.bias"), &self.bias));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        out.push(TensorMut::new(format!("{prefix}.weight"), &mut self.weight));
        out.push(TensorMut::new(format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Square-kernel convolution with zero padding, weights `(k·k·in, out)` with
/// row index `(ky·k + kx)·in + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub linear: Linear<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(inputs: usize, outputs: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            linear: Linear::zeros(kernel * kernel * inputs, outputs),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.linear.weight.nrows() / (self.kernel * self.kernel)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn im2col(&self, x: &FeatureMap<T>) -> Array2<T> {
        let (k, st, pad) = (self.kernel, self.stride, self.padding as isize);
        let cin = x.channels();
        let (oh, ow) = self.output_size(x.height, x.width);
        let mut cols = Array2::<T>::zeros((oh * ow, k * k * cin));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut row = cols.row_mut(oy * ow + ox);
                let row = row.as_slice_mut().expect("contiguous row");
                for ky in 0..k {
                    let iy = (oy * st + ky) as isize - pad;
                    if iy < 0 || iy >= x.height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * st + kx) as isize - pad;
                        if ix < 0 || ix >= x.width as isize {
                            continue;
                        }
                        let src = x.data.row(iy as usize * x.width + ix as usize);
                        let dst = &mut row[(ky * k + kx) * cin..(ky * k + kx + 1) * cin];
                        for (d, &v) in dst.iter_mut().zip(src.iter()) {
                            *d = v;
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<T>, height: usize, width: usize, cin: usize) -> Array2<T> {
        let (k, st, pad) = (self.kernel, self.stride, self.padding as isize);
        let (oh, ow) = self.output_size(height, width);
        let mut dx = Array2::<T>::zeros((height * width, cin));
        for oy in 0..oh {
            for ox in 0..ow {
                let row = dcols.row(oy * ow + ox);
                let row = row.as_slice().expect("contiguous row");
                for ky in 0..k {
                    let iy = (oy * st + ky) as isize - pad;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * st + kx) as isize - pad;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let mut dst = dx.row_mut(iy as usize * width + ix as usize);
                        let src = &row[(ky * k + kx) * cin..(ky * k + kx + 1) * cin];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, ConvCache<T>) {
        let cols = self.im2col(x);
        let (oh, ow) = self.output_size(x.height, x.width);
        let y = self.linear.forward(&cols.view());
        let cache = ConvCache {
            cols,
            height: x.height,
            width: x.width,
            channels: x.channels(),
        };
        (FeatureMap::new(oh, ow, y), cache)
    }

    /// Returns `dL/dx` when `input_grad` is set.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        dy: &Array2<T>,
        grad: &mut Self,
        input_grad: bool,
    ) -> Option<Array2<T>> {
        if !input_grad {
            ndarray::linalg::general_mat_mul(
                T::one(),
                &cache.cols.t(),
                dy,
                T::one(),
                &mut grad.linear.weight,
            );
            grad.linear.bias += &dy.sum_axis(Axis(0));
            return None;
        }
        let dcols = self.linear.backward(&cache.cols.view(), dy, &mut grad.linear);
        Some(self.col2im(&dcols, cache.height, cache.width, cache.channels))
    }
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Array2<T>,
    height: usize,
    width: usize,
    channels: usize,
}

impl<T: Scalar> ParamTensors<T> for Conv2d<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.linear.tensors(prefix, out);
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.linear.tensors_mut(prefix, out);
    }
}

/// 2×2 stride-2 transposed convolution; weights `(in, 4·out)` with column
/// index `(dy·2 + dx)·out + c`. Output pixel `(2i+dy, 2j+dx)` depends only
/// on input pixel `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> UpConv<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, 4 * outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    fn out_channels(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        let co = self.out_channels();
        let z = x.data.dot(&self.weight);
        let (h, w) = (x.height, x.width);
        let ow = 2 * w;
        let mut y = Array2::<T>::zeros((4 * h * w, co));
        for i in 0..h {
            for j in 0..w {
                let zr = z.row(i * w + j);
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let mut dst = y.row_mut((2 * i + dy) * ow + 2 * j + dx);
                    dst.assign(&zr.slice(s![d * co..(d + 1) * co]));
                    dst += &self.bias;
                }
            }
        }
        FeatureMap::new(2 * h, ow, y)
    }

    pub fn backward(&self, x: &FeatureMap<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let co = self.out_channels();
        let (h, w) = (x.height, x.width);
        let ow = 2 * w;
        let mut dz = Array2::<T>::zeros((h * w, 4 * co));
        for i in 0..h {
            for j in 0..w {
                let mut dst = dz.row_mut(i * w + j);
                for d in 0..4 {
                    let (ddy, ddx) = (d / 2, d % 2);
                    dst.slice_mut(s![d * co..(d + 1) * co])
                        .assign(&dy.row((2 * i + ddy) * ow + 2 * j + ddx));
                }
            }
        }
        ndarray::linalg::general_mat_mul(T::one(), &x.data.t(), &dz, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dz.dot(&self.weight.t())
    }
}

impl<T: Scalar> ParamTensors<T> for UpConv<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push(TensorRef::new(format!("{prefix}.weight"), &self.weight));
        out.push(TensorRef::new(format!("{prefix}.bias"), &self.bias));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        out.push(TensorMut::new(format!("{prefix}.weight"), &mut self.weight));
        out.push(TensorMut::new(format!("{prefix}.bias"), &mut self.bias));
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-token normalization over channels with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    normalized: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            gamma: Array1::zeros(channels),
            beta: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let (n, c) = x.dim();
        let cf = T::of_usize(c);
        let eps = T::of(LAYER_NORM_EPS);
        let mut normalized = Array2::<T>::zeros((n, c));
        let mut inv_std = Array1::<T>::zeros(n);
        let mut y = Array2::<T>::zeros((n, c));
        for r in 0..n {
            let row = x.row(r);
            let mean = row.sum() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let xh = (row[k] - mean) * is;
                normalized[[r, k]] = xh;
                y[[r, k]] = xh * self.gamma[k] + self.beta[k];
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Array2<T>, grad: &mut Self) -> Array2<T> {
        let (n, c) = dy.dim();
        let cf = T::of_usize(c);
        let mut dx = Array2::<T>::zeros((n, c));
        for r in 0..n {
            let xh = cache.normalized.row(r);
            let g = dy.row(r);
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for k in 0..c {
                grad.gamma[k] += g[k] * xh[k];
                grad.beta[k] += g[k];
                let d = g[k] * self.gamma[k];
                sum_d += d;
                sum_dx += d * xh[k];
            }
            let is = cache.inv_std[r];
            for k in 0..c {
                let d = g[k] * self.gamma[k];
                dx[[r, k]] = is * (d - sum_d / cf - xh[k] * sum_dx / cf);
            }
        }
        dx
    }
}

impl<T: Scalar> ParamTensors<T> for LayerNorm<T> {
    fn tensors<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push(TensorRef::new(format!("{prefix}.gamma"), &self.gamma));
        out.push(TensorRef::new(format!("{prefix}.beta"), &self.beta));
    }

    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        out.push(TensorMut::new(format!("{prefix}.gamma"), &mut self.gamma));
        out.push(TensorMut::new(format!("{prefix}.beta"), &mut self.beta));
    }
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
