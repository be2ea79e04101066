//! Multi-scale gradient magnitude similarity.
//!
//! Gradient magnitudes come from four 3×3 Sobel kernels (horizontal,
//! vertical and the two diagonals) applied per band with replicate-edge
//! padding. The loss averages `1 − GMS` over pixels and bands at each level of
//! a 2×2 average-pooling pyramid, then over levels.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `s_x`, `s_y`, `s_d1` (45°), `s_d2` (135°), indexed `[kernel][row][col]`.
pub const SOBEL: [[[i8; 3]; 3]; 4] = [
    [[1, 0, -1], [2, 0, -2], [1, 0, -1]],
    [[1, 2, 1], [0, 0, 0], [-1, -2, -1]],
    [[2, 1, 0], [1, 0, -1], [0, -1, -2]],
    [[0, 1, 2], [-1, 0, 1], [-2, -1, 0]],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsgmsConfig {
    pub stability_c: f64,
    pub scales: usize,
}

impl Default for MsgmsConfig {
    fn default() -> Self {
        Self {
            stability_c: 1.0,
            scales: 5,
        }
    }
}

impl MsgmsConfig {
    /// Smallest side length that keeps every pyramid level at least 3 pixels.
    pub fn min_side(&self) -> usize {
        3usize << self.scales.saturating_sub(1)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.stability_c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "stability constant must be positive, got {}",
                self.stability_c
            )));
        }
        if self.scales == 0 {
            return Err(Error::InvalidParameter("at least one scale required".into()));
        }
        if height.min(width) < self.min_side() {
            return Err(Error::InvalidParameter(format!(
                "{height}x{width} input is too small for {} scales (need {})",
                self.scales,
                self.min_side()
            )));
        }
        Ok(())
    }
}

#[inline]
fn clamp_offset(i: usize, d: usize, n: usize) -> usize {
    // d in 0..3 encodes offsets -1, 0, +1.
    (i + d).saturating_sub(1).min(n - 1)
}

/// Four directional responses of one band, each `h·w` row-major.
fn band_responses<T: Scalar>(band: &[T], h: usize, w: usize) -> [Vec<T>; 4] {
    let mut out: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); h * w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [T::zero(); 4];
            for dy in 0..3 {
                let row = clamp_offset(y, dy, h) * w;
                for dx in 0..3 {
                    let v = band[row + clamp_offset(x, dx, w)];
                    for (k, a) in acc.iter_mut().enumerate() {
                        let c = SOBEL[k][dy][dx];
                        if c != 0 {
                            *a += T::of(c as f64) * v;
                        }
                    }
                }
            }
            for k in 0..4 {
                out[k][y * w + x] = acc[k];
            }
        }
    }
    out
}

fn magnitude<T: Scalar>(r: &[Vec<T>; 4], i: usize) -> T {
    (r[0][i] * r[0][i] + r[1][i] * r[1][i] + r[2][i] * r[2][i] + r[3][i] * r[3][i]).sqrt()
}

/// Per-band Sobel gradient magnitude, same size as the input.
pub fn gradient_magnitude<T: Scalar>(cube: &HsiCube<T>) -> Result<HsiCube<T>> {
    cube.require_sobel_support()?;
    let (h, w, b) = cube.dims();
    let src = cube.as_slice();
    let mut out = Vec::with_capacity(h * w * b);
    for band in 0..b {
        let r = band_responses(&src[band * h * w..(band + 1) * h * w], h, w);
        out.extend((0..h * w).map(|i| magnitude(&r, i)));
    }
    HsiCube::new(h, w, b, out)
}

#[inline]
fn gms<T: Scalar>(a: T, b: T, c: T) -> T {
    (T::of(2.0) * a * b + c) / (a * a + b * b + c)
}

/// `(2·G_i·G_r + c) / (G_i² + G_r² + c)`, elementwise.
pub fn gms_map<T: Scalar>(g_i: &HsiCube<T>, g_r: &HsiCube<T>, c: T) -> Result<HsiCube<T>> {
    g_i.same_shape(g_r)?;
    if !(c > T::zero()) {
        return Err(Error::InvalidParameter("stability constant must be positive".into()));
    }
    let (h, w, b) = g_i.dims();
    let values = g_i
        .as_slice()
        .iter()
        .zip(g_r.as_slice())
        .map(|(&a, &r)| gms(a, r, c))
        .collect();
    HsiCube::new(h, w, b, values)
}

/// 2×2 stride-2 mean pooling per band. Odd trailing rows or columns are
/// dropped; the flag reports when that happened.
pub fn avg_pool_half<T: Scalar>(cube: &HsiCube<T>) -> (HsiCube<T>, bool) {
    let (h, w, b) = cube.dims();
    let (oh, ow) = (h / 2, w / 2);
    let truncated = h % 2 == 1 || w % 2 == 1;
    let src = cube.array();
    let quarter = T::of(0.25);
    let out = Array3::from_shape_fn((b, oh, ow), |(k, y, x)| {
        (src[[k, 2 * y, 2 * x]]
            + src[[k, 2 * y, 2 * x + 1]]
            + src[[k, 2 * y + 1, 2 * x]]
            + src[[k, 2 * y + 1, 2 * x + 1]])
            * quarter
    });
    (HsiCube::from_array(out), truncated)
}

fn pyramid<T: Scalar>(cube: &HsiCube<T>, scales: usize) -> Vec<HsiCube<T>> {
    let mut levels = Vec::with_capacity(scales);
    levels.push(cube.clone());
    for _ in 1..scales {
        let (next, truncated) = avg_pool_half(levels.last().expect("non-empty"));
        if truncated {
            log::debug!("odd side truncated while building the gradient pyramid");
        }
        levels.push(next);
    }
    levels
}

fn check_pair<T: Scalar>(x: &HsiCube<T>, y: &HsiCube<T>, cfg: &MsgmsConfig) -> Result<()> {
    x.same_shape(y)?;
    cfg.validate(x.height(), x.width())
}

/// Multi-scale GMS loss in `[0, 1)`; zero iff gradient magnitudes agree at
/// every pixel, band and scale.
pub fn msgms_loss<T: Scalar>(x: &HsiCube<T>, y: &HsiCube<T>, cfg: &MsgmsConfig) -> Result<T> {
    check_pair(x, y, cfg)?;
    let c = T::of(cfg.stability_c);
    let mut total = T::zero();
    for (xl, yl) in pyramid(x, cfg.scales).iter().zip(&pyramid(y, cfg.scales)) {
        let map = gms_map(&gradient_magnitude(xl)?, &gradient_magnitude(yl)?, c)?;
        let n = T::of_usize(map.as_slice().len());
        total += map.as_slice().iter().map(|&g| T::one() - g).sum::<T>() / n;
    }
    Ok(total / T::of_usize(cfg.scales))
}

/// Loss together with its gradient with respect to the second cube.
///
/// The loss is symmetric, so the gradient with respect to the first cube is
/// `msgms_loss_grad(y, x, cfg).1`.
pub fn msgms_loss_grad<T: Scalar>(
    x: &HsiCube<T>,
    y: &HsiCube<T>,
    cfg: &MsgmsConfig,
) -> Result<(T, HsiCube<T>)> {
    check_pair(x, y, cfg)?;
    let c = T::of(cfg.stability_c);
    let xs = pyramid(x, cfg.scales);
    let ys = pyramid(y, cfg.scales);
    let inv_s = T::one() / T::of_usize(cfg.scales);

    let mut total = T::zero();
    // Gradient with respect to each pyramid level of y, filled coarse to fine.
    let mut upstream: Option<Vec<T>> = None;
    for level in (0..cfg.scales).rev() {
        let (xl, yl) = (&xs[level], &ys[level]);
        let (h, w, b) = yl.dims();
        let scale = inv_s / T::of_usize(h * w * b);
        let mut grad = vec![T::zero(); h * w * b];
        for band in 0..b {
            let off = band * h * w;
            let rx = band_responses(&xl.as_slice()[off..off + h * w], h, w);
            let ry = band_responses(&yl.as_slice()[off..off + h * w], h, w);
            let g = &mut grad[off..off + h * w];
            for i in 0..h * w {
                let a = magnitude(&rx, i);
                let m = magnitude(&ry, i);
                let den = a * a + m * m + c;
                let num = T::of(2.0) * a * m + c;
                total += (T::one() - num / den) * scale;
                if m == T::zero() {
                    // Subgradient: the magnitude is not differentiable at 0.
                    continue;
                }
                let dgms_dm = (T::of(2.0) * a * den - num * T::of(2.0) * m) / (den * den);
                let d_m = -scale * dgms_dm;
                let yy = i / w;
                let xx = i % w;
                for k in 0..4 {
                    let d_r = d_m * ry[k][i] / m;
                    for dy in 0..3 {
                        let row = clamp_offset(yy, dy, h) * w;
                        for dx in 0..3 {
                            let coef = SOBEL[k][dy][dx];
                            if coef != 0 {
                                g[row + clamp_offset(xx, dx, w)] += T::of(coef as f64) * d_r;
                            }
                        }
                    }
                }
            }
        }
        if let Some(coarse) = upstream.take() {
            // Spread the coarser level's gradient back through the pooling.
            let (ch, cw) = (h / 2, w / 2);
            let quarter = T::of(0.25);
            for band in 0..b {
                for yy in 0..ch {
                    for xx in 0..cw {
                        let v = coarse[band * ch * cw + yy * cw + xx] * quarter;
                        let base = band * h * w;
                        grad[base + 2 * yy * w + 2 * xx] += v;
                        grad[base + 2 * yy * w + 2 * xx + 1] += v;
                        grad[base + (2 * yy + 1) * w + 2 * xx] += v;
                        grad[base + (2 * yy + 1) * w + 2 * xx + 1] += v;
                    }
                }
            }
        }
        upstream = Some(grad);
    }
    let (h, w, b) = y.dims();
    let grad = HsiCube::new(h, w, b, upstream.expect("at least one scale"))?;
    Ok((total, grad))
}

/// Mean squared error, the spectrum-wise ablation alternative.
pub fn l2_loss_grad<T: Scalar>(x: &HsiCube<T>, y: &HsiCube<T>) -> Result<(T, HsiCube<T>)> {
    x.same_shape(y)?;
    let n = T::of_usize(x.as_slice().len());
    let diff: Vec<T> = y.as_slice().iter().zip(x.as_slice()).map(|(&a, &b)| a - b).collect();
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
    let (h, w, b) = x.dims();
    let grad = HsiCube::new(h, w, b, diff.iter().map(|&d| T::of(2.0) * d / n).collect())?;
    Ok((loss, grad))
}
