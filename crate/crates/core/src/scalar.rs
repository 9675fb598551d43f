//! Scalar abstraction for the neural kernels.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of a [`Tensor`](crate::tensor::Tensor): `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    /// Converts from f64, rounding to the nearest representable value.
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

#[inline]
pub(crate) fn s<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

#[inline]
pub(crate) fn f<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}
