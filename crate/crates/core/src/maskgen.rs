//! Random Mask generation: irregular 4-connected regions grown from seed
//! pixels in randomly chosen grid patches, and the CutOut/CutMix fills that
//! turn a clean cube into a masked training input.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cube::HsiCube;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extra start pixels tried for a region before generation gives up.
pub const START_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskParams {
    /// Grid side `K`; the map is split into `K²` patches.
    pub grid_k: usize,
    /// Inclusive range for the number of regions.
    pub n_range: (usize, usize),
    /// Inclusive range for each region's area in pixels.
    pub area_range: (usize, usize),
    /// Acceptance probability for each frontier pixel during growth.
    pub merge_prob: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            grid_k: 8,
            n_range: (1, 32),
            area_range: (3, 20),
            merge_prob: 0.5,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let (n_min, n_max) = self.n_range;
        let (a_min, a_max) = self.area_range;
        if self.grid_k == 0 {
            return bad("grid_k must be positive".into());
        }
        if n_min > n_max {
            return bad(format!("empty region-count range [{n_min}, {n_max}]"));
        }
        let patches = self.grid_k * self.grid_k;
        if n_max > patches {
            return bad(format!("n_max {n_max} exceeds the {patches} grid patches"));
        }
        if n_max == patches {
            log::warn!("n_max equals K² = {patches}; every patch may receive a region");
        }
        if a_min == 0 || a_min > a_max {
            return bad(format!("invalid area range [{a_min}, {a_max}]"));
        }
        if !(self.merge_prob > 0.0 && self.merge_prob <= 1.0) {
            return bad(format!("merge_prob {} outside (0, 1]", self.merge_prob));
        }
        Ok(())
    }
}

/// Binary map over the image grid; `false` marks a masked pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskMap {
    height: usize,
    width: usize,
    kept: Vec<bool>,
    regions: Vec<Vec<(usize, usize)>>,
}

impl MaskMap {
    /// A map with nothing masked.
    pub fn all_kept(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            kept: vec![true; height * width],
            regions: Vec::new(),
        }
    }

    /// Builds a map from explicit regions, which must be disjoint and in bounds.
    pub fn from_regions(
        height: usize,
        width: usize,
        regions: Vec<Vec<(usize, usize)>>,
    ) -> Result<Self> {
        let mut kept = vec![true; height * width];
        for &(y, x) in regions.iter().flatten() {
            if y >= height || x >= width || !kept[y * width + x] {
                return Err(Error::InvalidParameter(format!(
                    "region pixel ({y}, {x}) is out of bounds or overlaps another region"
                )));
            }
            kept[y * width + x] = false;
        }
        Ok(Self {
            height,
            width,
            kept,
            regions,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_kept(&self, y: usize, x: usize) -> bool {
        self.kept[y * self.width + x]
    }

    /// Row-major keep flags.
    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    /// The grown regions, in generation order.
    pub fn regions(&self) -> &[Vec<(usize, usize)>] {
        &self.regions
    }

    pub fn masked_count(&self) -> usize {
        self.kept.iter().filter(|&&k| !k).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.kept.len() as f64
    }

    /// 8-bit preview: kept pixels white, masked pixels black.
    pub fn to_gray(&self) -> Vec<u8> {
        self.kept.iter().map(|&k| if k { 255 } else { 0 }).collect()
    }
}

fn neighbors(
    (y, x): (usize, usize),
    (h, w): (usize, usize),
) -> impl Iterator<Item = (usize, usize)> {
    let up = (y > 0).then(|| (y - 1, x));
    let down = (y + 1 < h).then(|| (y + 1, x));
    let left = (x > 0).then(|| (y, x - 1));
    let right = (x + 1 < w).then(|| (y, x + 1));
    [up, left, right, down].into_iter().flatten()
}

/// Size of the free 4-connected component containing `start`.
fn reachable(start: (usize, usize), bounds: (usize, usize), occupied: &[bool]) -> usize {
    let w = bounds.1;
    let mut seen = occupied.to_vec();
    seen[start.0 * w + start.1] = true;
    let mut stack = vec![start];
    let mut count = 0;
    while let Some(p) = stack.pop() {
        count += 1;
        for q in neighbors(p, bounds) {
            if !seen[q.0 * w + q.1] {
                seen[q.0 * w + q.1] = true;
                stack.push(q);
            }
        }
    }
    count
}

/// Grows a 4-connected region of exactly `area` pixels from `start`.
///
/// Each sweep visits the current frontier in row-major order and merges each
/// candidate with probability `merge_prob`, stopping as soon as the target
/// area is reached. Rejected candidates are offered again on the next sweep.
/// `occupied` is a row-major `h × w` grid of pixels the region must avoid.
pub fn grow_region<R: Rng + ?Sized>(
    start: (usize, usize),
    area: usize,
    bounds: (usize, usize),
    occupied: &[bool],
    merge_prob: f64,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    let (h, w) = bounds;
    assert_eq!(occupied.len(), h * w, "occupancy grid must match bounds");
    if start.0 >= h || start.1 >= w {
        return Err(Error::InvalidParameter(format!(
            "start {start:?} outside {h}x{w}"
        )));
    }
    if occupied[start.0 * w + start.1] {
        return Err(Error::InvalidParameter(format!(
            "start {start:?} is already occupied"
        )));
    }
    if area == 0 {
        return Err(Error::InvalidParameter("region area must be positive".into()));
    }

    let mut member = vec![false; h * w];
    member[start.0 * w + start.1] = true;
    let mut region = vec![start];
    let mut frontier = Vec::new();
    while region.len() < area {
        frontier.clear();
        for &p in &region {
            for q in neighbors(p, bounds) {
                let i = q.0 * w + q.1;
                if !member[i] && !occupied[i] {
                    frontier.push(i);
                }
            }
        }
        frontier.sort_unstable();
        frontier.dedup();
        if frontier.is_empty() {
            return Err(Error::GrowthFailed {
                start,
                requested: area,
                reachable: reachable(start, bounds, occupied),
            });
        }
        for &i in &frontier {
            if rng.random_bool(merge_prob) {
                member[i] = true;
                region.push((i / w, i % w));
                if region.len() == area {
                    break;
                }
            }
        }
    }
    Ok(region)
}

/// Draws a mask map: `N` regions seeded in `N` distinct grid patches.
pub fn generate_mask_map<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    params: &MaskParams,
    rng: &mut R,
) -> Result<MaskMap> {
    params.validate()?;
    let k = params.grid_k;
    if !height.is_multiple_of(k) || !width.is_multiple_of(k) {
        return Err(Error::InvalidParameter(format!(
            "{height}x{width} is not divisible by grid_k {k}"
        )));
    }
    let (ph, pw) = (height / k, width / k);
    let n = rng.random_range(params.n_range.0..=params.n_range.1);
    let patches = index::sample(rng, k * k, n);

    let mut occupied = vec![false; height * width];
    let mut regions = Vec::with_capacity(n);
    for patch in patches.iter() {
        let area = rng.random_range(params.area_range.0..=params.area_range.1);
        let (py, px) = (patch / k, patch % k);
        let mut last_err = None;
        let mut grown = None;
        for _ in 0..=START_RETRIES {
            let start = (
                py * ph + rng.random_range(0..ph),
                px * pw + rng.random_range(0..pw),
            );
            if occupied[start.0 * width + start.1] {
                last_err = Some(Error::GrowthFailed {
                    start,
                    requested: area,
                    reachable: 0,
                });
                continue;
            }
            match grow_region(start, area, (height, width), &occupied, params.merge_prob, rng) {
                Ok(r) => {
                    grown = Some(r);
                    break;
                }
                Err(e @ Error::GrowthFailed { .. }) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        let region = match grown {
            Some(r) => r,
            None => return Err(last_err.expect("at least one attempt")),
        };
        for &(y, x) in &region {
            occupied[y * width + x] = true;
        }
        regions.push(region);
    }
    MaskMap::from_regions(height, width, regions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FillMode {
    /// Masked spectra become zero.
    #[default]
    CutOut,
    /// Masked spectra are copied from a donor cube.
    CutMix,
}

#[derive(Debug, Clone, Copy)]
pub struct FillSpec<'a, T> {
    pub mode: FillMode,
    pub donor: Option<&'a HsiCube<T>>,
}

impl<'a, T> FillSpec<'a, T> {
    pub fn cutout() -> Self {
        Self {
            mode: FillMode::CutOut,
            donor: None,
        }
    }

    pub fn cutmix(donor: &'a HsiCube<T>) -> Self {
        Self {
            mode: FillMode::CutMix,
            donor: Some(donor),
        }
    }
}

/// `X_M = X ⊗ M + I ⊗ (1 − M)`, replacing the full spectrum of every masked
/// pixel with the fill cube `I`.
pub fn apply_mask<T: Scalar>(
    cube: &HsiCube<T>,
    mask: &MaskMap,
    fill: &FillSpec<'_, T>,
) -> Result<HsiCube<T>> {
    let (h, w, b) = cube.dims();
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: (h, w, b),
            actual: (mask.height(), mask.width(), b),
        });
    }
    let donor = match fill.mode {
        FillMode::CutOut => None,
        FillMode::CutMix => {
            let d = fill.donor.ok_or_else(|| {
                Error::InvalidParameter("CutMix fill requires a donor cube".into())
            })?;
            cube.same_shape(d)?;
            Some(d)
        }
    };
    let mut out = cube.array().clone();
    for y in 0..h {
        for x in 0..w {
            if mask.is_kept(y, x) {
                continue;
            }
            for band in 0..b {
                out[[band, y, x]] = donor.map_or(T::zero(), |d| d.array()[[band, y, x]]);
            }
        }
    }
    Ok(HsiCube::from_array(out))
}
