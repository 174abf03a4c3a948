//! Scalar abstraction shared by the geometric, model, filter and
//! observability code. Everything numeric in those modules is written
//! against [`Scalar`], so the same code runs in `f32` on constrained
//! targets and in `f64` for analysis.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive {
    /// Smallest distance treated as non-degenerate (two agents closer than
    /// this are considered to collide).
    fn min_distance() -> Self;
}

impl Scalar for f32 {
    fn min_distance() -> Self {
        1e-6
    }
}

impl Scalar for f64 {
    fn min_distance() -> Self {
        1e-9
    }
}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    // Every Scalar implementor is a primitive float.
    x.to_f64().unwrap_or(f64::NAN)
}
