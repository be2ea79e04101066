//! Hyperspectral anomaly detection with a self-supervised enhancement network.
//!
//! The crate covers the whole pipeline: cube I/O and synthetic scenes,
//! random-mask augmentation, the gradient-magnitude similarity loss, a
//! windowed-attention U-shaped reconstruction network with hand-written
//! gradients, the training loop with validation-driven model selection, RX
//! detectors and ROC-based metrics.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the working precision to `f64`.

pub mod cube;
pub mod desk;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod maskgen;
pub mod msgms;
pub mod net;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use cube::{GroundTruthMap, HsiCube};
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working-precision cube.
pub type Cube = HsiCube<f64>;
/// Storage-precision cube.
pub type Cube32 = HsiCube<f32>;
/// Working-precision network parameters.
pub type Params = net::NetParams<f64>;
