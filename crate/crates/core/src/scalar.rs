//! Floating-point abstraction shared by the numeric kernels.

use ndarray::NdFloat;
use num_traits::{FloatConst, FromPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Real scalar used throughout the inference code. Implemented for `f32` and `f64`.
pub trait Real: NdFloat + FloatConst + FromPrimitive + Serialize + DeserializeOwned {
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn half() -> Self {
        Self::lit(0.5)
    }

    fn two() -> Self {
        Self::lit(2.0)
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
