//! Scalar abstraction over the floating-point element type.

use std::fmt::{Debug, Display};

/// Floating-point element type of tensors and model parameters.
///
/// `f32` is the training/inference default; `f64` is used where tight
/// numerical verification is needed (finite-difference gradient checks,
/// reference optimizer comparisons).
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Copy + Debug + Display + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn into_f64(self) -> f64;
    /// Narrowing conversion used by the checkpoint format, which always
    /// stores 32-bit payloads.
    fn into_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn into_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
    #[inline]
    fn into_f32(self) -> f32 {
        self as f32
    }
}
