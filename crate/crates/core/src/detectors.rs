//! RX anomaly detectors and the network-enhanced detection pipeline.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cube::{normalize_symmetric, select_bands, HsiCube};
use crate::error::{Error, Result};
use crate::io::{cube_paths, load_cube, save_cube, to_gray, write_pgm};
use crate::linalg::Cholesky;
use crate::net::{forward_cached, NetParams, NetworkConfig};
use crate::scalar::Scalar;

/// Default relative ridge added to the covariance diagonal.
pub const DEFAULT_RIDGE: f64 = 1e-10;

/// Background mean and inverse covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats<T> {
    pub mean: Array1<T>,
    /// Regularized covariance, ridge included.
    pub cov: Array2<T>,
    pub inv_cov: Array2<T>,
    pub ridge_used: T,
}

impl<T: Scalar> GaussianStats<T> {
    /// `(y − μ)ᵀ Λ⁻¹ (y − μ)`, clamped at zero.
    pub fn mahalanobis(&self, y: ArrayView1<'_, T>) -> T {
        let d = &y - &self.mean;
        d.dot(&self.inv_cov.dot(&d)).max(T::zero())
    }
}

/// Mean and centered rows. The mean is taken relative to the first row so a
/// set of identical spectra centers to exact zeros.
fn center<T: Scalar>(rows: &Array2<T>) -> (Array1<T>, Array2<T>) {
    let n = T::of_usize(rows.nrows());
    let anchor = rows.row(0).to_owned();
    let mut centered = rows - &anchor;
    let shift = centered.sum_axis(Axis(0)) / n;
    centered -= &shift;
    (anchor + shift, centered)
}

fn regularized<T: Scalar>(mut cov: Array2<T>, mean: Array1<T>, ridge_eps: f64) -> Result<GaussianStats<T>> {
    let b = cov.nrows();
    let mean_diag = cov.diag().sum() / T::of_usize(b);
    let eps = T::of(ridge_eps);
    let ridge = if mean_diag > T::zero() { eps * mean_diag } else { eps };
    cov.diag_mut().mapv_inplace(|v| v + ridge);
    let chol = Cholesky::factor(&cov).map_err(|e| Error::SingularCovariance {
        ridge: ridge.as_f64(),
        condition: e.condition,
    })?;
    Ok(GaussianStats {
        mean,
        inv_cov: chol.inverse(),
        cov,
        ridge_used: ridge,
    })
}

/// Statistics of the rows of an `(N, B)` sample matrix, unbiased divisor.
pub fn sample_stats<T: Scalar>(rows: &Array2<T>, ridge_eps: f64) -> Result<GaussianStats<T>> {
    let n = rows.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "covariance needs at least two samples, got {n}"
        )));
    }
    let (mean, centered) = center(rows);
    let cov = centered.t().dot(&centered) / T::of_usize(n - 1);
    regularized(cov, mean, ridge_eps)
}

/// Mean and inverse covariance of all spectra in the cube.
pub fn global_stats<T: Scalar>(cube: &HsiCube<T>, ridge_eps: f64) -> Result<GaussianStats<T>> {
    sample_stats(&cube.pixels(), ridge_eps)
}

/// Per-pixel anomaly scores, finite and non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T> {
    height: usize,
    width: usize,
    scores: Vec<T>,
}

impl<T: Scalar> ScoreMap<T> {
    pub fn new(height: usize, width: usize, scores: Vec<T>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::SizeMismatch {
                expected: height * width,
                actual: scores.len(),
            });
        }
        if let Some((index, v)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < T::zero()) {
            return Err(if v.is_finite() {
                Error::InvalidParameter(format!("negative score {v} at index {index}"))
            } else {
                Error::NonFinite {
                    index,
                    value: v.as_f64(),
                }
            });
        }
        Ok(Self { height, width, scores })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Row-major scores.
    pub fn scores(&self) -> &[T] {
        &self.scores
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.scores[y * self.width + x]
    }

    pub fn max(&self) -> T {
        self.scores.iter().fold(T::zero(), |m, &v| m.max(v))
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.scores.iter().enumerate() {
            if v > self.scores[best] {
                best = i;
            }
        }
        best
    }

    /// Applies `f` to every score; the result must stay finite and non-negative.
    pub fn map(&self, f: impl Fn(T) -> T) -> Result<Self> {
        Self::new(self.height, self.width, self.scores.iter().map(|&v| f(v)).collect())
    }

    pub fn to_cube(&self) -> HsiCube<T> {
        HsiCube::new(self.height, self.width, 1, self.scores.clone()).expect("valid scores")
    }

    pub fn from_cube(cube: &HsiCube<T>) -> Result<Self> {
        if cube.bands() != 1 {
            return Err(Error::InvalidParameter(format!(
                "score maps have one band, got {}",
                cube.bands()
            )));
        }
        Self::new(cube.height(), cube.width(), cube.as_slice().to_vec())
    }
}

/// Writes `<stem>.json`/`<stem>.raw` plus a min/max scaled `<stem>.pgm`.
pub fn save_score_map<T: Scalar>(map: &ScoreMap<T>, path: &Path) -> Result<()> {
    save_cube(&map.to_cube(), path)?;
    let (header, _) = cube_paths(path);
    write_pgm(&header.with_extension("pgm"), map.height, map.width, &to_gray(&map.scores))
}

pub fn load_score_map<T: Scalar>(path: &Path) -> Result<ScoreMap<T>> {
    ScoreMap::from_cube(&load_cube(path)?)
}

/// Global RX with the default ridge.
pub fn grx<T: Scalar>(cube: &HsiCube<T>) -> Result<ScoreMap<T>> {
    grx_with_ridge(cube, DEFAULT_RIDGE)
}

pub fn grx_with_ridge<T: Scalar>(cube: &HsiCube<T>, ridge_eps: f64) -> Result<ScoreMap<T>> {
    let rows = cube.pixels();
    let n = rows.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter("GRX needs at least two pixels".into()));
    }
    let (mean, centered) = center(&rows);
    let cov = centered.t().dot(&centered) / T::of_usize(n - 1);
    let stats = regularized(cov, mean, ridge_eps)?;
    let projected = centered.dot(&stats.inv_cov);
    let scores = (&projected * &centered)
        .sum_axis(Axis(1))
        .mapv(|v| v.max(T::zero()))
        .to_vec();
    ScoreMap::new(cube.height(), cube.width(), scores)
}

/// Concentric inner/outer windows for local RX, both odd side lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualWindow {
    pub inner: usize,
    pub outer: usize,
}

impl Default for DualWindow {
    fn default() -> Self {
        Self { inner: 13, outer: 29 }
    }
}

impl DualWindow {
    pub fn validate(&self) -> Result<()> {
        if self.inner < 3 || self.inner >= self.outer || self.inner.is_multiple_of(2) || self.outer.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "dual window ({}, {}) must be odd with 3 <= inner < outer",
                self.inner, self.outer
            )));
        }
        Ok(())
    }
}

/// Local RX scores plus the pixels that fell back to global statistics.
#[derive(Debug, Clone)]
pub struct LrxOutput<T> {
    pub scores: ScoreMap<T>,
    /// Row-major flags; set where the ring held fewer than `B + 1` pixels.
    pub fallback: Vec<bool>,
}

impl<T> LrxOutput<T> {
    pub fn fallback_count(&self) -> usize {
        self.fallback.iter().filter(|&&f| f).count()
    }
}

/// Pixels of the ring between the inner and outer windows around `(y, x)`,
/// clipped at the image border.
pub fn ring_pixels(y: usize, x: usize, h: usize, w: usize, dw: DualWindow) -> Vec<(usize, usize)> {
    let (ro, ri) = (dw.outer / 2, dw.inner / 2);
    let mut out = Vec::new();
    for yy in y.saturating_sub(ro)..(y + ro + 1).min(h) {
        for xx in x.saturating_sub(ro)..(x + ro + 1).min(w) {
            if yy.abs_diff(y) <= ri && xx.abs_diff(x) <= ri {
                continue;
            }
            out.push((yy, xx));
        }
    }
    out
}

/// Local RX with the dual window `dw`.
pub fn lrx<T: Scalar>(cube: &HsiCube<T>, dw: DualWindow) -> Result<LrxOutput<T>> {
    lrx_with_ridge(cube, dw, DEFAULT_RIDGE)
}

pub fn lrx_with_ridge<T: Scalar>(cube: &HsiCube<T>, dw: DualWindow, ridge_eps: f64) -> Result<LrxOutput<T>> {
    dw.validate()?;
    let (h, w, b) = cube.dims();
    if dw.outer > h.min(w) {
        return Err(Error::InvalidParameter(format!(
            "outer window {} exceeds the {h}x{w} image",
            dw.outer
        )));
    }
    let pixels = cube.pixels();
    let global = sample_stats(&pixels, ridge_eps)?;
    let results: Vec<Result<(T, bool)>> = (0..h * w)
        .into_par_iter()
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let ring = ring_pixels(y, x, h, w, dw);
            if ring.len() < b + 1 {
                return Ok((global.mahalanobis(pixels.row(i)), true));
            }
            let mut rows = Array2::<T>::zeros((ring.len(), b));
            for (r, &(yy, xx)) in ring.iter().enumerate() {
                rows.row_mut(r).assign(&pixels.row(yy * w + xx));
            }
            let (mean, centered) = center(&rows);
            let mut cov = centered.t().dot(&centered) / T::of_usize(ring.len() - 1);
            let mean_diag = cov.diag().sum() / T::of_usize(b);
            let eps = T::of(ridge_eps);
            let ridge = if mean_diag > T::zero() { eps * mean_diag } else { eps };
            cov.diag_mut().mapv_inplace(|v| v + ridge);
            let chol = Cholesky::factor(&cov).map_err(|e| Error::SingularCovariance {
                ridge: ridge.as_f64(),
                condition: e.condition,
            })?;
            let d = &pixels.row(i) - &mean;
            let mut sol = d.to_vec();
            chol.solve_in_place(&mut sol);
            let score = d.iter().zip(&sol).map(|(&a, &b)| a * b).sum::<T>();
            Ok((score.max(T::zero()), false))
        })
        .collect();
    let mut scores = Vec::with_capacity(h * w);
    let mut fallback = Vec::with_capacity(h * w);
    for r in results {
        let (s, f) = r?;
        scores.push(s);
        fallback.push(f);
    }
    if fallback.iter().any(|&f| f) {
        log::warn!(
            "LRX: {} pixels used global statistics (ring smaller than B + 1)",
            fallback.iter().filter(|&&f| f).count()
        );
    }
    Ok(LrxOutput {
        scores: ScoreMap::new(h, w, scores)?,
        fallback,
    })
}

/// Band selection and `[-0.1, 0.1]` scaling applied before the network.
pub fn prepare_input<T: Scalar>(cube: &HsiCube<T>, cfg: &NetworkConfig) -> Result<HsiCube<T>> {
    let selected = select_bands(cube, cfg.input_size.2)?;
    Ok(normalize_symmetric(&selected).0)
}

/// Network reconstruction of a raw cube: prepare, then forward.
pub fn enhance<T: Scalar>(cube: &HsiCube<T>, params: &NetParams<T>, cfg: &NetworkConfig) -> Result<HsiCube<T>> {
    let x = prepare_input(cube, cfg)?;
    Ok(forward_cached(&x, params, cfg)?.0)
}

/// Enhancement followed by an arbitrary detector.
pub fn enhance_and_detect_with<T: Scalar>(
    cube: &HsiCube<T>,
    params: &NetParams<T>,
    cfg: &NetworkConfig,
    detector: impl FnOnce(&HsiCube<T>) -> Result<ScoreMap<T>>,
) -> Result<ScoreMap<T>> {
    detector(&enhance(cube, params, cfg)?)
}

/// `grx(forward(normalize_symmetric(select_bands(cube))))`.
pub fn enhance_and_detect<T: Scalar>(
    cube: &HsiCube<T>,
    params: &NetParams<T>,
    cfg: &NetworkConfig,
) -> Result<ScoreMap<T>> {
    enhance_and_detect_with(cube, params, cfg, grx)
}

/// Body output `forward(Y) − Y` for the prepared input `Y`.
///
/// This is the body tensor itself, so `Y + residual_map(Y)` reproduces the
/// network output bit for bit.
pub fn residual_map<T: Scalar>(cube: &HsiCube<T>, params: &NetParams<T>, cfg: &NetworkConfig) -> Result<HsiCube<T>> {
    let x = prepare_input(cube, cfg)?;
    let (_, cache) = forward_cached(&x, params, cfg)?;
    Ok(cache.body().clone())
}

/// Mean absolute residual over bands for each pixel.
pub fn residual_magnitude<T: Scalar>(residual: &HsiCube<T>) -> Array2<T> {
    residual
        .array()
        .mapv(|v| v.abs())
        .mean_axis(Axis(0))
        .expect("at least one band")
}
