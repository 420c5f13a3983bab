//! Floating point abstraction shared by every numerical module.

use std::fmt::{Debug, Display};

use faer::traits::RealField;
use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// A real scalar usable by the dense kernels: `f32` or `f64`.
pub trait Real:
    RealField
    + Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal.
    fn of(x: f64) -> Self;

    /// Lossy conversion to `f64` for reporting.
    fn to_f64_lossy(self) -> f64;

    /// Scales a tolerance stated for `f64` to this type's precision.
    ///
    /// For `f64` the tolerance is returned unchanged; narrower types widen it
    /// by the square root of the ratio of machine epsilons.
    fn tolerance(f64_tol: f64) -> Self {
        let ratio = (Self::epsilon().to_f64_lossy() / f64::EPSILON).sqrt();
        Self::of(f64_tol * ratio.max(1.0))
    }
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
