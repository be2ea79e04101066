//! Synthetic hyperspectral scenes with known anomalies.
//!
//! Background pixels are convex mixtures of a few smooth random spectra, with
//! mixing weights that vary smoothly across the image. Anomalies are
//! 4-connected blobs grown with the same procedure as the training masks and
//! filled with an extra spectrum offset from the background mean.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cube::{GroundTruthMap, HsiCube};
use crate::error::{Error, Result};
use crate::maskgen::{grow_region, START_RETRIES};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub endmember_count: usize,
    pub anomaly_count: usize,
    /// Inclusive blob area range in pixels.
    pub anomaly_area_range: (usize, usize),
    /// RMS distance between the anomaly spectrum and the mean endmember.
    pub contrast: f64,
    pub noise_sigma: f64,
    /// `(height, width, bands)`.
    pub size: (usize, usize, usize),
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            endmember_count: 4,
            anomaly_count: 3,
            anomaly_area_range: (4, 16),
            contrast: 0.1,
            noise_sigma: 0.005,
            size: (64, 64, 30),
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let (h, w, b) = self.size;
        if h < 3 || w < 3 || b == 0 {
            return bad(format!("scene must be at least 3x3x1, got {h}x{w}x{b}"));
        }
        if self.endmember_count == 0 {
            return bad("endmember_count must be positive".into());
        }
        if !(self.contrast > 0.0) || !self.contrast.is_finite() {
            return bad(format!("contrast must be positive, got {}", self.contrast));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        let (a_min, a_max) = self.anomaly_area_range;
        if self.anomaly_count > 0 {
            if a_min == 0 || a_min > a_max {
                return bad(format!("invalid anomaly area range [{a_min}, {a_max}]"));
            }
            if 2 * self.anomaly_count * a_max >= h * w {
                return bad(format!(
                    "{} blobs of up to {a_max} pixels cannot stay a minority of {h}x{w}",
                    self.anomaly_count
                ));
            }
        }
        Ok(())
    }
}

/// A generated scene together with the blobs that make up its ground truth.
#[derive(Debug, Clone)]
pub struct SynthScene<T> {
    pub cube: HsiCube<T>,
    pub truth: GroundTruthMap,
    pub blobs: Vec<Vec<(usize, usize)>>,
}

/// Smooth random spectrum: a baseline plus three Gaussian bumps.
fn smooth_spectrum<R: Rng>(bands: usize, rng: &mut R) -> Array1<f64> {
    let base = rng.random_range(0.25..0.6);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.2..0.2),
                rng.random_range(0.0..1.0),
                rng.random_range(0.08..0.3),
            )
        })
        .collect();
    Array1::from_shape_fn(bands, |b| {
        let t = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
        base + bumps
            .iter()
            .map(|&(a, c, s)| a * (-(t - c).powi(2) / (2.0 * s * s)).exp())
            .sum::<f64>()
    })
}

/// Low-frequency random field built from a few plane waves.
fn smooth_field<R: Rng>(h: usize, w: usize, rng: &mut R) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.3..1.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        waves
            .iter()
            .map(|&(a, fy, fx, ph)| a * (2.0 * PI * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + ph).cos())
            .sum()
    })
}

fn place_blobs<R: Rng>(params: &SynthParams, rng: &mut R) -> Result<Vec<Vec<(usize, usize)>>> {
    let (h, w, _) = params.size;
    let mut occupied = vec![false; h * w];
    let mut blobs = Vec::with_capacity(params.anomaly_count);
    for _ in 0..params.anomaly_count {
        let area = rng.random_range(params.anomaly_area_range.0..=params.anomaly_area_range.1);
        let mut last_err = None;
        let mut grown = None;
        for _ in 0..=START_RETRIES {
            let start = (rng.random_range(0..h), rng.random_range(0..w));
            if occupied[start.0 * w + start.1] {
                continue;
            }
            match grow_region(start, area, (h, w), &occupied, 0.5, rng) {
                Ok(r) => {
                    grown = Some(r);
                    break;
                }
                Err(e @ Error::GrowthFailed { .. }) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        let blob = grown.ok_or_else(|| {
            last_err.unwrap_or_else(|| {
                Error::InvalidParameter(format!("no free start pixel found for a {area}-pixel blob"))
            })
        })?;
        for &(y, x) in &blob {
            occupied[y * w + x] = true;
        }
        blobs.push(blob);
    }
    Ok(blobs)
}

/// Generates a scene and its ground truth; deterministic in `seed`.
pub fn synth_scene<T: Scalar>(params: &SynthParams, seed: u64) -> Result<(HsiCube<T>, GroundTruthMap)> {
    synth_scene_detailed(params, seed).map(|s| (s.cube, s.truth))
}

pub fn synth_scene_detailed<T: Scalar>(params: &SynthParams, seed: u64) -> Result<SynthScene<T>> {
    params.validate()?;
    let (h, w, b) = params.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let endmembers: Vec<Array1<f64>> = (0..params.endmember_count)
        .map(|_| smooth_spectrum(b, &mut rng))
        .collect();
    let fields: Vec<Array2<f64>> = (0..params.endmember_count)
        .map(|_| smooth_field(h, w, &mut rng))
        .collect();

    let mut data = Array3::<f64>::zeros((b, h, w));
    for y in 0..h {
        for x in 0..w {
            // Softmax of the fields gives convex weights.
            let logits: Vec<f64> = fields.iter().map(|f| 2.0 * f[[y, x]]).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let total: f64 = weights.iter().sum();
            for (e, wt) in endmembers.iter().zip(&weights) {
                let a = wt / total;
                for band in 0..b {
                    data[[band, y, x]] += a * e[band];
                }
            }
        }
    }

    // Anomaly spectrum: mean endmember plus a smooth offset of RMS `contrast`.
    let mean = endmembers.iter().fold(Array1::zeros(b), |acc, e| acc + e) / params.endmember_count as f64;
    let direction = smooth_spectrum(b, &mut rng);
    let direction = &direction - direction.mean().unwrap_or(0.0) + rng.random_range(-0.05..0.05);
    let rms = (direction.mapv(|v| v * v).sum() / b as f64).sqrt().max(1e-12);
    let target = &mean + &(direction * (params.contrast / rms));

    let blobs = place_blobs(params, &mut rng)?;
    let mut labels = vec![false; h * w];
    for &(y, x) in blobs.iter().flatten() {
        labels[y * w + x] = true;
        for band in 0..b {
            data[[band, y, x]] = target[band];
        }
    }

    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
        data.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    let truth = if params.anomaly_count == 0 {
        GroundTruthMap::background(h, w)
    } else {
        GroundTruthMap::new(h, w, labels)?
    };
    Ok(SynthScene {
        cube: HsiCube::from_array(data.mapv(T::of)),
        truth,
        blobs,
    })
}
