//! Hyperspectral cube data model and the preprocessing primitives applied to
//! it before detection or training.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// An `H × W × B` hyperspectral cube stored band-sequentially.
///
/// The backing array has shape `(bands, height, width)`, so each band is a
/// contiguous row-major image and the flat buffer matches the on-disk BSQ
/// layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube<T> {
    data: Array3<T>,
}

impl<T: Scalar> HsiCube<T> {
    /// Builds a cube from band-sequential values, rejecting non-finite entries.
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidParameter(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if values.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: values.len(),
            });
        }
        if let Some((index, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: v.as_f64(),
            });
        }
        let data = Array3::from_shape_vec((bands, height, width), values)
            .expect("length checked above");
        Ok(Self { data })
    }

    /// Wraps a `(bands, height, width)` array. Values are trusted to be finite.
    pub fn from_array(data: Array3<T>) -> Self {
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Self {
            data: data.as_standard_layout().into_owned(),
        }
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self {
            data: Array3::zeros((bands, height, width)),
        }
    }

    /// Builds a cube from an `(H·W, B)` pixel matrix in row-major pixel order.
    pub fn from_pixels(height: usize, width: usize, pixels: &Array2<T>) -> Self {
        assert_eq!(pixels.nrows(), height * width);
        let bands = pixels.ncols();
        let data = pixels
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((bands, height, width))
            .expect("pixel count matches");
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[0]
    }

    /// `(height, width, bands)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height(), self.width(), self.bands())
    }

    pub fn pixel_count(&self) -> usize {
        self.height() * self.width()
    }

    pub fn view(&self) -> ArrayView3<'_, T> {
        self.data.view()
    }

    pub fn array(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_array(self) -> Array3<T> {
        self.data
    }

    /// Band-sequential flat values.
    pub fn as_slice(&self) -> &[T] {
        self.data.as_slice().expect("standard layout")
    }

    pub fn band(&self, b: usize) -> ArrayView2<'_, T> {
        self.data.index_axis(Axis(0), b)
    }

    pub fn spectrum(&self, y: usize, x: usize) -> ArrayView1<'_, T> {
        self.data.slice(s![.., y, x])
    }

    /// `(H·W, B)` matrix with one spectrum per row, pixels in row-major order.
    pub fn pixels(&self) -> Array2<T> {
        let (h, w, b) = self.dims();
        self.data
            .view()
            .into_shape_with_order((b, h * w))
            .expect("standard layout")
            .t()
            .as_standard_layout()
            .into_owned()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.mapv(f),
        }
    }

    /// Converts to another precision.
    pub fn cast<U: Scalar>(&self) -> HsiCube<U> {
        HsiCube {
            data: self.data.mapv(|v| U::of(v.as_f64())),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::ShapeMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        Ok(())
    }

    /// Checks the Sobel support requirement (both sides at least 3).
    pub fn require_sobel_support(&self) -> Result<()> {
        if self.height() < 3 || self.width() < 3 {
            return Err(Error::InvalidParameter(format!(
                "cube {}x{} is smaller than the 3x3 gradient support",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// Binary per-pixel truth, `true` marking an anomaly target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthMap {
    height: usize,
    width: usize,
    labels: Vec<bool>,
}

impl GroundTruthMap {
    pub fn new(height: usize, width: usize, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::SizeMismatch {
                expected: height * width,
                actual: labels.len(),
            });
        }
        let targets = labels.iter().filter(|&&l| l).count();
        if 2 * targets >= labels.len() {
            return Err(Error::InvalidParameter(format!(
                "{targets} of {} pixels are targets; anomalies must be a minority",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.labels[y * self.width + x]
    }

    pub fn target_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn background_count(&self) -> usize {
        self.labels.len() - self.target_count()
    }
}

/// The affine map applied by a normalization, kept so it can be undone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rescale<T> {
    pub src_min: T,
    pub src_max: T,
    pub dst_min: T,
    pub dst_max: T,
    /// Set when the input was constant; the output is then all zeros.
    pub degenerate: bool,
}

impl<T: Scalar> Rescale<T> {
    fn forward(&self, v: T) -> T {
        let t = (v - self.src_min) / (self.src_max - self.src_min);
        self.dst_min + t * (self.dst_max - self.dst_min)
    }

    fn backward(&self, v: T) -> T {
        let t = (v - self.dst_min) / (self.dst_max - self.dst_min);
        self.src_min + t * (self.src_max - self.src_min)
    }

    /// Maps a normalized cube back to the original value range.
    pub fn invert(&self, cube: &HsiCube<T>) -> HsiCube<T> {
        if self.degenerate {
            return cube.map(|_| self.src_min);
        }
        cube.map(|v| self.backward(v))
    }
}

fn rescale<T: Scalar>(cube: &HsiCube<T>, dst_min: T, dst_max: T) -> (HsiCube<T>, Rescale<T>) {
    let (lo, hi) = cube.min_max();
    let degenerate = hi <= lo;
    let map = Rescale {
        src_min: lo,
        src_max: hi,
        dst_min,
        dst_max,
        degenerate,
    };
    if degenerate {
        log::debug!("constant cube passed to normalization");
        return (cube.map(|_| T::zero()), map);
    }
    // Clamp guards the endpoints against one-ulp overshoot.
    let out = cube.map(|v| map.forward(v).max(dst_min).min(dst_max));
    (out, map)
}

/// Whole-cube min/max scaling to `[0, 1]`.
pub fn normalize_unit<T: Scalar>(cube: &HsiCube<T>) -> (HsiCube<T>, Rescale<T>) {
    rescale(cube, T::zero(), T::one())
}

/// Whole-cube min/max scaling to `[-0.1, 0.1]`, the network input range.
pub fn normalize_symmetric<T: Scalar>(cube: &HsiCube<T>) -> (HsiCube<T>, Rescale<T>) {
    rescale(cube, T::of(-0.1), T::of(0.1))
}

/// Keeps the first `n` bands.
pub fn select_bands<T: Scalar>(cube: &HsiCube<T>, n: usize) -> Result<HsiCube<T>> {
    if n == 0 || n > cube.bands() {
        return Err(Error::InvalidParameter(format!(
            "band count {n} outside 1..={}",
            cube.bands()
        )));
    }
    Ok(HsiCube::from_array(cube.data.slice(s![..n, .., ..]).to_owned()))
}

/// The four `size × size` corner crops: top-left, top-right, bottom-left,
/// bottom-right.
pub fn crop_four<T: Scalar>(cube: &HsiCube<T>, size: usize) -> Result<[HsiCube<T>; 4]> {
    let (h, w, _) = cube.dims();
    if size == 0 || h < size || w < size {
        return Err(Error::InvalidParameter(format!(
            "cannot crop {size}x{size} from a {h}x{w} cube"
        )));
    }
    let crop = |y: usize, x: usize| {
        HsiCube::from_array(
            cube.data
                .slice(s![.., y..y + size, x..x + size])
                .to_owned(),
        )
    };
    Ok([
        crop(0, 0),
        crop(0, w - size),
        crop(h - size, 0),
        crop(h - size, w - size),
    ])
}

/// One of the 16 rigid transforms of a square grid: counter-clockwise
/// quarter turns followed by optional horizontal and vertical flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RigidTransform {
    pub quarter_turns: u8,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl RigidTransform {
    /// Uniform rotation, then each flip with probability one half.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            quarter_turns: rng.random_range(0..4u8),
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
        }
    }

    /// Source pixel that lands at `(y, x)` in an `n × n` output.
    fn source(&self, n: usize, y: usize, x: usize) -> (usize, usize) {
        let y = if self.flip_vertical { n - 1 - y } else { y };
        let x = if self.flip_horizontal { n - 1 - x } else { x };
        match self.quarter_turns % 4 {
            0 => (y, x),
            1 => (x, n - 1 - y),
            2 => (n - 1 - y, n - 1 - x),
            _ => (n - 1 - x, y),
        }
    }

    pub fn apply<T: Scalar>(&self, cube: &HsiCube<T>) -> Result<HsiCube<T>> {
        let (h, w, b) = cube.dims();
        if h != w {
            return Err(Error::InvalidParameter(format!(
                "rotation needs a square cube, got {h}x{w}"
            )));
        }
        let mut out = Array3::zeros((b, h, w));
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = self.source(h, y, x);
                out.slice_mut(s![.., y, x]).assign(&cube.data.slice(s![.., sy, sx]));
            }
        }
        Ok(HsiCube { data: out })
    }
}

pub fn random_rotate_flip<T: Scalar, R: Rng + ?Sized>(
    cube: &HsiCube<T>,
    rng: &mut R,
) -> Result<HsiCube<T>> {
    if cube.height() != cube.width() {
        return Err(Error::InvalidParameter(format!(
            "rotation needs a square cube, got {}x{}",
            cube.height(),
            cube.width()
        )));
    }
    RigidTransform::sample(rng).apply(cube)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize, b: usize) -> HsiCube<f64> {
        HsiCube::new(h, w, b, (0..h * w * b).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn nan_is_rejected_with_index() {
        let mut v = vec![0.0; 27];
        v[13] = f64::NAN;
        match HsiCube::new(3, 3, 3, v) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 13),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pixels_round_trip() {
        let c = ramp(4, 5, 3);
        let p = c.pixels();
        assert_eq!(p.dim(), (20, 3));
        assert_eq!(p[[6, 2]], c.array()[[2, 1, 1]]);
        assert_eq!(HsiCube::from_pixels(4, 5, &p), c);
    }

    #[test]
    fn select_first_bands() {
        let c = ramp(64, 64, 276);
        let s = select_bands(&c, 50).unwrap();
        assert_eq!(s.dims(), (64, 64, 50));
        for b in 0..50 {
            assert_eq!(s.band(b), c.band(b));
        }
        assert_eq!(select_bands(&c, 276).unwrap(), c);
        assert!(select_bands(&c, 0).is_err());
        assert!(select_bands(&c, 277).is_err());
    }

    #[test]
    fn unit_normalization_is_affine() {
        let v: Vec<f64> = (0..27).map(|i| 5.0 + 20.0 * i as f64 / 26.0).collect();
        let c = HsiCube::new(3, 3, 3, v.clone()).unwrap();
        let (n, map) = normalize_unit(&c);
        assert!(!map.degenerate);
        for (a, b) in n.as_slice().iter().zip(&v) {
            assert!((a - (b - 5.0) / 20.0).abs() < 1e-15);
        }
        let (again, _) = normalize_unit(&n);
        assert_eq!(again, n);
    }

    #[test]
    fn constant_cube_normalizes_to_zeros_with_flag() {
        let c = HsiCube::new(3, 3, 2, vec![4.2; 18]).unwrap();
        for (n, map) in [normalize_unit(&c), normalize_symmetric(&c)] {
            assert!(map.degenerate);
            assert!(n.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn symmetric_normalization_round_trips() {
        let v: Vec<f64> = (0..48).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        let c = HsiCube::new(4, 4, 3, v).unwrap();
        let (n, map) = normalize_symmetric(&c);
        let (lo, hi) = c.min_max();
        for (a, b) in n.as_slice().iter().zip(c.as_slice()) {
            let t = (b - lo) / (hi - lo);
            assert!((a - (0.2 * t - 0.1)).abs() < 1e-15);
        }
        let back = map.invert(&n);
        for (a, b) in back.as_slice().iter().zip(c.as_slice()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn corner_crops() {
        let c = ramp(66, 66, 2);
        let crops = crop_four(&c, 64).unwrap();
        assert_eq!(crops[0].array()[[0, 0, 0]], c.array()[[0, 0, 0]]);
        assert_eq!(crops[1].array()[[1, 0, 0]], c.array()[[1, 0, 2]]);
        assert_eq!(crops[2].array()[[0, 63, 5]], c.array()[[0, 65, 5]]);
        assert_eq!(crops[3].array()[[1, 63, 63]], c.array()[[1, 65, 65]]);

        let sq = ramp(64, 64, 1);
        let crops = crop_four(&sq, 64).unwrap();
        assert!(crops.iter().all(|k| *k == sq));
        assert!(crop_four(&ramp(63, 64, 1), 64).is_err());
    }

    #[test]
    fn forced_transforms() {
        let c = ramp(5, 5, 2);
        assert_eq!(RigidTransform::default().apply(&c).unwrap(), c);
        let cancel = RigidTransform {
            quarter_turns: 2,
            flip_horizontal: true,
            flip_vertical: true,
        };
        assert_eq!(cancel.apply(&c).unwrap(), c);
        let quarter = RigidTransform {
            quarter_turns: 1,
            ..Default::default()
        };
        let mut r = c.clone();
        for _ in 0..4 {
            r = quarter.apply(&r).unwrap();
        }
        assert_eq!(r, c);
        assert_ne!(quarter.apply(&c).unwrap(), c);
    }

    #[test]
    fn rotate_flip_is_seeded_and_rejects_rectangles() {
        let c = ramp(6, 6, 3);
        let a = random_rotate_flip(&c, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = random_rotate_flip(&c, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert!(random_rotate_flip(&ramp(6, 5, 1), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn truth_map_rejects_majority_targets() {
        assert!(GroundTruthMap::new(2, 2, vec![true, true, false, false]).is_err());
        assert!(GroundTruthMap::new(2, 2, vec![true, false, false, false]).is_ok());
    }
}
