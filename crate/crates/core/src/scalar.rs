//! Floating-point element trait.
//!
//! The whole stack is generic over the element type: training runs in
//! single precision, gradient checks and oracles in double precision.

use std::fmt::Debug;

/// Element type for tensors. Implemented for `f32` and `f64`.
///
/// Conversion methods are named `of_*`/`as_*` to stay clear of the
/// `num_traits` casting traits that ride along with `Float`.
pub trait Scalar: num_traits::Float + Debug + Default + Send + Sync + 'static {
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn of_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn of_f32(x: f32) -> Self {
        x
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn of_f32(x: f32) -> Self {
        x as f64
    }
    #[inline]
    fn as_f32(self) -> f32 {
        self as f32
    }
}

/// Shorthand for converting an `f64` literal into the generic element type.
#[inline]
pub fn s<S: Scalar>(x: f64) -> S {
    S::of_f64(x)
}
