//! Floating-point abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar usable by every numeric kernel in the crate.
///
/// Combines the `num-traits` float operations with the bounds `ndarray`
/// needs for matrix products and scalar broadcasting. Implemented for `f32`
/// and `f64`; the training pipeline uses [`crate::F`] (`f64`).
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, for constants written in source.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant must convert")
    }

    /// Lossy conversion to `f64`, for reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converts_constants_both_widths() {
        assert_eq!(<f32 as Scalar>::of(1.5), 1.5f32);
        assert_eq!(<f64 as Scalar>::of(1.5), 1.5f64);
        assert_eq!(2.5f32.as_f64(), 2.5f64);
    }
}
