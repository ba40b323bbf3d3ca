//! Scalar abstraction: every numeric kernel in the crate is generic over a
//! floating-point type so the same code path can run fast (`f32`) or serve as
//! the reference for finite-difference gradient checks (`f64`).

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Trait bundle required by the tensor kernels. `ndarray`'s `dot` dispatches
/// `f32`/`f64` to the fast matrixmultiply path, so both aliases below get
/// real GEMM performance.
pub trait Scalar:
    Float
    + NumAssignOps
    + ScalarOperand
    + LinalgScalar
    + Sum<Self>
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion for logging and reports.
    fn to_f64(self) -> f64;

    fn from_f64(v: f64) -> Self;

    /// Name used in checkpoint headers ("f32" / "f64").
    fn dtype_name() -> &'static str;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn dtype_name() -> &'static str {
        "f32"
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn dtype_name() -> &'static str {
        "f64"
    }
}
