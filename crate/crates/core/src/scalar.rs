//! Scalar abstraction so the model, losses, and metrics run at either
//! precision. Training and gradient checks want `f64`; `f32` halves the
//! memory for larger runs.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar every numeric path in this crate is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` for constants and checkpoints.
    fn cast(x: f64) -> Self {
        num_traits::NumCast::from(x).expect("f64 constant representable")
    }

    /// Widen to `f64` for reporting and checkpoint storage.
    fn into_f64(self) -> f64 {
        num_traits::NumCast::from(self).expect("scalar fits in f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
