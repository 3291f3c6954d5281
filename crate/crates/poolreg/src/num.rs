//! Scalar abstraction for the numeric core.
//!
//! The solver and term math are generic over [`Real`] so they run in `f32`
//! or `f64`; everything user-facing defaults to `f64` through default type
//! parameters on the generic types.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the working scalar.
#[inline]
pub fn real<R: Real>(v: f64) -> R {
    R::from_f64(v).expect("f64 converts to Real")
}

/// Numerically stable `ln(1 + e^eta)`.
#[inline]
pub fn softplus<R: Real>(eta: R) -> R {
    eta.max(R::zero()) + (-eta.abs()).exp().ln_1p()
}

/// Logistic function `1 / (1 + e^-eta)`.
#[inline]
pub fn sigmoid<R: Real>(eta: R) -> R {
    let one = R::one();
    if eta >= R::zero() {
        one / (one + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (one + e)
    }
}
