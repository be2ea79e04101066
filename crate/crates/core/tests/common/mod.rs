#![allow(dead_code)]

pub mod oracles;

use hsiad::net::{NetParams, NetworkConfig};
use hsiad::{GroundTruthMap, HsiCube};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Smallest configuration exercising every block: 16×16×6, C = 8, 4×4 windows.
pub fn tiny() -> NetworkConfig {
    NetworkConfig {
        channels: 8,
        heads: [2, 4, 8, 4, 2],
        window_partition: 4,
        mlp_ratio: 4,
        input_size: (16, 16, 6),
        zero_residual_start: false,
    }
}

pub fn random_cube(h: usize, w: usize, b: usize, rng: &mut ChaCha8Rng) -> HsiCube<f64> {
    HsiCube::new(h, w, b, (0..h * w * b).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap()
}

/// Overwrites every parameter, including biases, norms and bias tables,
/// with uniform noise of the given amplitude.
pub fn scramble(p: &mut NetParams<f64>, amplitude: f64, rng: &mut ChaCha8Rng) {
    for t in p.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v = rng.random_range(-amplitude..amplitude));
    }
}

/// Truth map with `count` distinct target pixels.
pub fn random_truth(h: usize, w: usize, count: usize, rng: &mut ChaCha8Rng) -> GroundTruthMap {
    let mut labels = vec![false; h * w];
    let mut placed = 0;
    while placed < count {
        let i = rng.random_range(0..h * w);
        if !labels[i] {
            labels[i] = true;
            placed += 1;
        }
    }
    GroundTruthMap::new(h, w, labels).unwrap()
}
