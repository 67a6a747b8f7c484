//! Scalar abstraction for the numeric core.
//!
//! Geometry and the classifier are generic over [`Real`] so the same code
//! runs in `f32` or `f64`. The pipeline-level types at the crate root pin
//! `f64`, which is what the tolerances in the test suite assume.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + serde::Serialize
    + serde::de::DeserializeOwned
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` constant into the working scalar type.
#[inline]
pub fn rf<R: Real>(v: f64) -> R {
    R::from_f64(v).expect("f64 constant representable in scalar type")
}

/// Widen a scalar to `f64` for reporting and thresholds.
#[inline]
pub fn wf<R: Real>(v: R) -> f64 {
    v.to_f64().expect("scalar convertible to f64")
}
