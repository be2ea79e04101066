//! Independent reference computations shared by the oracle suites and the
//! acceptance run. Nothing here calls into the library's numeric code.

use std::collections::BTreeSet;

use hsiad::detectors::DEFAULT_RIDGE;
use hsiad::maskgen::MaskParams;
use hsiad::net::NetParams;
use hsiad::{GroundTruthMap, HsiCube};
use nalgebra::{DMatrix, DVector};

// ---- RX ----

pub fn spectra(cube: &HsiCube<f64>) -> Vec<Vec<f64>> {
    cube.pixels().rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Two-pass mean and unbiased covariance of the given spectra, with the
/// same relative ridge as the detectors.
pub fn gaussian_stats(spectra: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = spectra.len();
    let b = spectra[0].len();
    let mut mean = DVector::zeros(b);
    for s in spectra {
        mean += DVector::from_column_slice(s);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(b, b);
    for s in spectra {
        let d = DVector::from_column_slice(s) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    let ridge = DEFAULT_RIDGE * cov.trace() / b as f64;
    for k in 0..b {
        cov[(k, k)] += ridge;
    }
    (mean, cov)
}

/// Mahalanobis distance by a fresh LU solve, no precomputed inverse.
pub fn mahalanobis(y: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = DVector::from_column_slice(y) - mean;
    let sol = cov.clone().lu().solve(&d).expect("regular covariance");
    d.dot(&sol)
}

/// Global RX scores of every pixel, one linear solve per pixel.
pub fn grx_scores(cube: &HsiCube<f64>) -> Vec<f64> {
    let px = spectra(cube);
    let (mean, cov) = gaussian_stats(&px);
    px.iter().map(|y| mahalanobis(y, &mean, &cov)).collect()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

// ---- metrics ----

/// Probability that a random target outscores a random background pixel,
/// ties counted as one half.
pub fn pair_count_auc(s: &[f64], gt: &GroundTruthMap) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in s.iter().enumerate() {
        if !gt.labels()[i] {
            continue;
        }
        for (j, &b) in s.iter().enumerate() {
            if gt.labels()[j] {
                continue;
            }
            pairs += 1.0;
            wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    wins / pairs
}

/// Literal evaluation: clip at the lower median target score, scale to
/// [0, 1], then integrate both detection rates over τ with the trapezoid
/// rule on every distinct level.
pub fn straight_line_asnpr(s: &[f64], gt: &GroundTruthMap) -> f64 {
    let mut t: Vec<f64> = s.iter().zip(gt.labels()).filter(|p| *p.1).map(|p| *p.0).collect();
    t.sort_by(f64::total_cmp);
    let clip = t[(t.len() - 1) / 2];
    let c: Vec<f64> = s.iter().map(|&v| v.min(clip)).collect();
    let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let n: Vec<f64> = c.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let rate = |tau: f64, want: bool| {
        let (mut hit, mut all) = (0.0, 0.0);
        for (v, &l) in n.iter().zip(gt.labels()) {
            if l == want {
                all += 1.0;
                if *v >= tau {
                    hit += 1.0;
                }
            }
        }
        hit / all
    };
    let mut taus = n.clone();
    taus.extend([0.0, 1.0]);
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let (mut d, mut f) = (0.0, 0.0);
    for k in 1..taus.len() {
        let dt = taus[k] - taus[k - 1];
        d += dt * (rate(taus[k - 1], true) + rate(taus[k], true)) / 2.0;
        f += dt * (rate(taus[k - 1], false) + rate(taus[k], false)) / 2.0;
    }
    10.0 * (d / f).log10()
}

// ---- MSGMS ----

const KX: [[f64; 3]; 3] = [[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]];
const KY: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [0.0, 0.0, 0.0], [-1.0, -2.0, -1.0]];
const KD1: [[f64; 3]; 3] = [[2.0, 1.0, 0.0], [1.0, 0.0, -1.0], [0.0, -1.0, -2.0]];
const KD2: [[f64; 3]; 3] = [[0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], [-2.0, -1.0, 0.0]];

type Band = Vec<Vec<f64>>;

fn bands(cube: &HsiCube<f64>) -> Vec<Band> {
    let (h, w, b) = cube.dims();
    (0..b)
        .map(|k| (0..h).map(|y| (0..w).map(|x| cube.array()[[k, y, x]]).collect()).collect())
        .collect()
}

fn magnitude(img: &Band) -> Band {
    let (h, w) = (img.len() as isize, img[0].len() as isize);
    let px = |y: isize, x: isize| img[y.clamp(0, h - 1) as usize][x.clamp(0, w - 1) as usize];
    let respond = |k: &[[f64; 3]; 3], y: isize, x: isize| {
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += k[i][j] * px(y + i as isize - 1, x + j as isize - 1);
            }
        }
        s
    };
    (0..h)
        .map(|y| {
            (0..w)
                .map(|x| {
                    let r = [respond(&KX, y, x), respond(&KY, y, x), respond(&KD1, y, x), respond(&KD2, y, x)];
                    r.iter().map(|v| v * v).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect()
}

fn pool(img: &Band) -> Band {
    (0..img.len() / 2)
        .map(|y| {
            (0..img[0].len() / 2)
                .map(|x| (img[2 * y][2 * x] + img[2 * y][2 * x + 1] + img[2 * y + 1][2 * x] + img[2 * y + 1][2 * x + 1]) / 4.0)
                .collect()
        })
        .collect()
}

/// Multi-scale GMS loss by plain loops over every band and pixel.
pub fn msgms_loss(a: &HsiCube<f64>, b: &HsiCube<f64>, c: f64, scales: usize) -> f64 {
    let (mut xa, mut xb) = (bands(a), bands(b));
    let mut total = 0.0;
    for s in 0..scales {
        if s > 0 {
            xa = xa.iter().map(pool).collect();
            xb = xb.iter().map(pool).collect();
        }
        let (mut sum, mut count) = (0.0, 0.0);
        for (ba, bb) in xa.iter().zip(&xb) {
            let (ga, gb) = (magnitude(ba), magnitude(bb));
            for (ra, rb) in ga.iter().zip(&gb) {
                for (&p, &q) in ra.iter().zip(rb) {
                    sum += 1.0 - (2.0 * p * q + c) / (p * p + q * q + c);
                    count += 1.0;
                }
            }
        }
        total += sum / count;
    }
    total / scales as f64
}

// ---- finite differences ----

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so gradients at round-off
/// level are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

pub fn fd_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Copy of `p` with the `k`-th scalar of the flattened list moved by `delta`.
pub fn with_param(p: &NetParams<f64>, k: usize, delta: f64) -> NetParams<f64> {
    let mut q = p.clone();
    let mut k = k;
    for t in q.tensors_mut() {
        if k < t.data.len() {
            t.data[k] += delta;
            break;
        }
        k -= t.data.len();
    }
    q
}

/// Flattened `(tensor name, value)` list in tensor order.
pub fn flat(p: &NetParams<f64>) -> Vec<(String, f64)> {
    p.tensors()
        .into_iter()
        .flat_map(|t| t.data.iter().map(move |&v| (t.name.clone(), v)).collect::<Vec<_>>())
        .collect()
}

// ---- masks ----

pub fn is_connected(region: &[(usize, usize)]) -> bool {
    let set: BTreeSet<_> = region.iter().copied().collect();
    let mut seen = BTreeSet::from([region[0]]);
    let mut stack = vec![region[0]];
    while let Some((y, x)) = stack.pop() {
        for q in [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)] {
            if set.contains(&q) && seen.insert(q) {
                stack.push(q);
            }
        }
    }
    seen.len() == set.len()
}

/// Expected masked fraction: regions are disjoint with exact areas, so the
/// masked count is the sum of `N` independent areas.
pub fn expected_mask_fraction(p: &MaskParams, h: usize, w: usize) -> f64 {
    let mean = |(a, b): (usize, usize)| (a + b) as f64 / 2.0;
    mean(p.n_range) * mean(p.area_range) / (h * w) as f64
}

// ---- shifted windows ----

/// Every token pair of every window after rolling an `h × w` map by
/// `-shift`, as `(window, query token, key token, may attend)`. A pair may
/// attend iff the roll moved both tokens by the same displacement.
pub fn window_pairs(h: usize, w: usize, win: usize, shift: usize) -> Vec<(usize, usize, usize, bool)> {
    let orig = |ry: usize, rx: usize| ((ry + shift) % h, (rx + shift) % w);
    let mut out = Vec::new();
    let per_row = w / win;
    for wy in 0..h / win {
        for wx in 0..per_row {
            let cells: Vec<(usize, usize)> = (0..win * win).map(|p| (wy * win + p / win, wx * win + p % win)).collect();
            for &(qy, qx) in &cells {
                for &(ky, kx) in &cells {
                    let (oqy, oqx) = orig(qy, qx);
                    let (oky, okx) = orig(ky, kx);
                    let same = oqy as isize - qy as isize == oky as isize - ky as isize
                        && oqx as isize - qx as isize == okx as isize - kx as isize;
                    out.push((wy * per_row + wx, oqy * w + oqx, oky * w + okx, same));
                }
            }
        }
    }
    out
}
