//! Scalar abstraction over `f32`/`f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating-point scalar the numeric core is generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Additive stand-in for -inf in attention masks.
    fn neg_large() -> Self {
        Self::from_f64(-1.0e9).unwrap()
    }

    fn from_f64_c(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    fn to_f64_c(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
