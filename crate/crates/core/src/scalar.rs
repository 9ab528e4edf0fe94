//! Scalar abstraction shared by every numeric module.
//!
//! Storage can be `f32` (the production type) or `f64` (used by gradient
//! checks and oracles). Reductions always run through `f64` regardless of
//! the storage type.

use num_traits::Float;
use std::fmt::{Debug, Display};

pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    /// Bytes per value in little-endian serialized form.
    const BYTES: usize;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
