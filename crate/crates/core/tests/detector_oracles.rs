//! RX detectors and the enhancement pipeline against direct computations.

mod common;

use common::oracles::{gaussian_stats as oracle_stats, mahalanobis as oracle_score, rel, spectra};
use common::{random_cube, scramble, tiny};
use hsiad::detectors::{
    enhance, enhance_and_detect, global_stats, grx, lrx, prepare_input, residual_map, DualWindow, DEFAULT_RIDGE,
};
use hsiad::net::{forward, init_params, NetParams, NetworkConfig};
use hsiad::trainer::domain_metric;
use hsiad::HsiCube;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn grx_matches_linear_solve_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for (h, w, b) in [(8, 8, 4), (12, 10, 6), (20, 16, 8)] {
        let cube = random_cube(h, w, b, &mut rng);
        let scores = grx(&cube).unwrap();
        let px = spectra(&cube);
        let (mean, cov) = oracle_stats(&px);
        for (s, y) in scores.scores().iter().zip(&px) {
            let want = oracle_score(y, &mean, &cov);
            assert!(rel(*s, want) < 1e-6, "{s} vs {want}");
        }
    }
}

#[test]
fn covariance_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let sigma = [0.5, 1.0, 2.0];
    let values: Vec<f64> = (0..3)
        .flat_map(|k| {
            let s = sigma[k];
            (0..40 * 40).map(|_| rng.random_range(-1.0..1.0) * s * 3f64.sqrt()).collect::<Vec<_>>()
        })
        .collect();
    let cube = HsiCube::new(40, 40, 3, values).unwrap();
    let stats = global_stats(&cube, DEFAULT_RIDGE).unwrap();
    let (mean, cov) = oracle_stats(&spectra(&cube));
    for i in 0..3 {
        assert!((stats.mean[i] - mean[i]).abs() < 1e-9);
        for j in 0..3 {
            assert!((stats.cov[[i, j]] - cov[(i, j)]).abs() < 1e-9);
        }
        // Uniform with variance σ², within a loose sampling tolerance.
        assert!((stats.cov[[i, i]] / (sigma[i] * sigma[i]) - 1.0).abs() < 0.15);
    }
}

#[test]
fn grx_mean_score_identity() {
    // With the unbiased covariance the mean score is B·(N−1)/N exactly,
    // up to the ridge.
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for (h, w, b) in [(8, 8, 4), (16, 12, 7), (32, 32, 8)] {
        let cube = random_cube(h, w, b, &mut rng);
        let s = grx(&cube).unwrap();
        let n = (h * w) as f64;
        let mean = s.scores().iter().sum::<f64>() / n;
        let want = b as f64 * (n - 1.0) / n;
        assert!(rel(mean, want) < 1e-6, "{mean} vs {want}");
    }
}

#[test]
fn grx_is_invariant_under_invertible_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let cube = random_cube(12, 12, 4, &mut rng);
    let a = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
    let c = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
    let px = cube.pixels();
    let mut out = px.clone();
    for (mut dst, src) in out.rows_mut().into_iter().zip(px.rows()) {
        let y = &a * DVector::from_iterator(4, src.iter().copied()) + &c;
        dst.iter_mut().zip(y.iter()).for_each(|(d, v)| *d = *v);
    }
    let moved = HsiCube::from_pixels(12, 12, &out);
    let (s0, s1) = (grx(&cube).unwrap(), grx(&moved).unwrap());
    for (a, b) in s0.scores().iter().zip(s1.scores()) {
        assert!(rel(*b, *a) < 1e-6);
    }
}

#[test]
fn lrx_matches_ring_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let cube = random_cube(15, 15, 3, &mut rng);
    let dw = DualWindow { inner: 3, outer: 7 };
    let out = lrx(&cube, dw).unwrap();
    let mut fallbacks = 0;
    for y in 0..15isize {
        for x in 0..15isize {
            let mut ring = Vec::new();
            for dy in -3..=3isize {
                for dx in -3..=3isize {
                    let (yy, xx) = (y + dy, x + dx);
                    let inside = (0..15).contains(&yy) && (0..15).contains(&xx);
                    if inside && (dy.abs() > 1 || dx.abs() > 1) {
                        ring.push((0..3).map(|k| cube.array()[[k, yy as usize, xx as usize]]).collect::<Vec<_>>());
                    }
                }
            }
            let me: Vec<f64> = (0..3).map(|k| cube.array()[[k, y as usize, x as usize]]).collect();
            let got = out.scores.get(y as usize, x as usize);
            if ring.len() < 4 {
                fallbacks += 1;
                continue;
            }
            let (mean, cov) = oracle_stats(&ring);
            let want = oracle_score(&me, &mean, &cov);
            assert!(rel(got, want) < 1e-6, "({y},{x}): {got} vs {want}");
        }
    }
    // Corner rings still hold 7 pixels here, so nothing falls back.
    assert_eq!(fallbacks, 0);
    assert_eq!(out.fallback_count(), 0);
}

fn zero_start() -> (NetworkConfig, NetParams<f64>) {
    let cfg = NetworkConfig { zero_residual_start: true, ..tiny() };
    let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(36)).unwrap();
    (cfg, p)
}

fn trained_like() -> (NetworkConfig, NetParams<f64>) {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut p = init_params(&cfg, &mut rng).unwrap();
    scramble(&mut p, 0.1, &mut rng);
    (cfg, p)
}

fn raw_scene() -> HsiCube<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    random_cube(16, 16, 9, &mut rng).map(|v| 50.0 * v + 20.0)
}

#[test]
fn identity_network_reduces_to_grx() {
    let (cfg, p) = zero_start();
    let raw = raw_scene();
    let prepared = prepare_input(&raw, &cfg).unwrap();
    assert_eq!(prepared.bands(), 6);
    assert_eq!(enhance_and_detect(&raw, &p, &cfg).unwrap(), grx(&prepared).unwrap());
    let residual = residual_map(&raw, &p, &cfg).unwrap();
    assert!(residual.as_slice().iter().all(|&v| v == 0.0));
    let metric = domain_metric(&p, &prepared, &cfg).unwrap();
    assert_eq!(metric, grx(&prepared).unwrap().max());
}

#[test]
fn enhancement_composes_from_separate_steps() {
    let (cfg, p) = trained_like();
    let raw = raw_scene();
    let prepared = prepare_input(&raw, &cfg).unwrap();
    let y = forward(&prepared, &p, &cfg).unwrap();
    assert_eq!(enhance(&raw, &p, &cfg).unwrap(), y);
    let composed = grx(&y).unwrap();
    let direct = enhance_and_detect(&raw, &p, &cfg).unwrap();
    for (a, b) in direct.scores().iter().zip(composed.scores()) {
        assert!((a - b).abs() <= 1e-12);
    }
    let metric = domain_metric(&p, &prepared, &cfg).unwrap();
    assert!((metric - composed.max()).abs() <= 1e-9);

    // Adding the residual back reproduces the output exactly.
    let residual = residual_map(&raw, &p, &cfg).unwrap();
    let rebuilt: Vec<f64> = prepared.as_slice().iter().zip(residual.as_slice()).map(|(a, b)| a + b).collect();
    assert_eq!(rebuilt, y.as_slice());
}

#[test]
fn constant_reconstruction_has_zero_domain_metric() {
    let (cfg, p) = zero_start();
    let flat = HsiCube::new(16, 16, 6, vec![0.05; 16 * 16 * 6]).unwrap();
    assert_eq!(domain_metric(&p, &flat, &cfg).unwrap(), 0.0);
}
