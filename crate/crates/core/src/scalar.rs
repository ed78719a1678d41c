//! Scalar element types tensors are generic over.

use num_traits::{Float, NumAssignOps};

/// Floating-point element type for tensors and model arithmetic.
///
/// Implemented for `f32` and `f64`. The model and training paths run on
/// `f64`; the `f32` instantiation exists so the benchmark harness times a
/// realistic single-precision kernel.
pub trait Real:
    Float + NumAssignOps + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}
