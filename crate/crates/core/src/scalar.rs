//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable by the estimators.
///
/// Implemented for `f32` and `f64`. Tolerances in the public API are given
/// as `f64` and converted with [`Scalar::lit`].
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Debug + Display + LowerExp + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 constant representable")
    }

    /// Lossy conversion to `f64` for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize representable")
    }

    /// Machine epsilon of the type.
    fn eps() -> Self;

    /// Largest finite value.
    fn max_finite() -> Self;

    fn infinity() -> Self;

    /// Gradient tolerance `tol`, raised to what the type can resolve (`64 ε`).
    fn gradient_tol(tol: f64) -> Self {
        Self::lit(tol).max(Self::eps() * Self::lit(64.0))
    }

    /// Tolerance accepted after a stalled line search, raised to at least `√ε`.
    fn stall_tol(tol: f64) -> Self {
        Self::lit(tol).max(Self::eps().sqrt())
    }
}

impl Scalar for f32 {
    fn eps() -> Self {
        f32::EPSILON
    }
    fn max_finite() -> Self {
        f32::MAX
    }
    fn infinity() -> Self {
        f32::INFINITY
    }
}

impl Scalar for f64 {
    fn eps() -> Self {
        f64::EPSILON
    }
    fn max_finite() -> Self {
        f64::MAX
    }
    fn infinity() -> Self {
        f64::INFINITY
    }
}

pub(crate) fn to_f64_vec<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|x| x.as_f64()).collect()
}
