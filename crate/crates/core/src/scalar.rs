//! Floating point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable for cubes, networks and detectors: `f32` or `f64`.
///
/// Wraps [`num_traits::Float`] with the handful of extras the numerics need
/// (error function for GELU, infallible casts).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn erf(self) -> Self;

    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 representable")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("finite cast")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        <Self as ToPrimitive>::to_f32(&self).expect("finite cast")
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
