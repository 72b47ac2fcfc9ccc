//! Scalar abstraction for the numeric core.
//!
//! The tensor engine, layers, and model are generic over [`Scalar`] so the
//! same code runs in f32 or f64. The pipeline modules (data, training,
//! metrics, analysis) use the f64 aliases exported at the crate root.

use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar type the numeric core is generic over.
pub trait Scalar: Float + FromPrimitive + Sum + Debug + Display + Send + Sync + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an f64 constant into the scalar type.
#[inline]
pub fn fc<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("constant representable in scalar type")
}
