//! Scalar abstraction shared by the geometry and learning code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar usable for point storage, geometry and the MLP stack.
///
/// Implemented for `f32` (sensor storage) and `f64` (losses, training).
pub trait Real:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
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
    fn from_f64_lossy(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Squared Euclidean distance between two 3-vectors, accumulated in f64.
#[inline]
pub fn dist2<T: Real>(a: &[T; 3], b: &[T; 3]) -> f64 {
    let dx = a[0].to_f64_lossy() - b[0].to_f64_lossy();
    let dy = a[1].to_f64_lossy() - b[1].to_f64_lossy();
    let dz = a[2].to_f64_lossy() - b[2].to_f64_lossy();
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn norm3<T: Real>(a: &[T; 3]) -> f64 {
    dist2(a, &[T::zero(); 3]).sqrt()
}
