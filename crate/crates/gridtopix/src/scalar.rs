//! Scalar abstraction over the element type of tensors.
//!
//! The numerical core is generic over `Scalar` so the same forward/backward
//! code can run in `f32` (training) and `f64` (the finite-difference
//! harness in [`crate::gradcheck`]). Concrete aliases live at the crate
//! root.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type usable by the tensor core: `f32` or `f64`.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for constants and RNG draws.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(v: f64) -> f64 {
        S::from_f64_lossy(v).to_f64_lossy()
    }

    #[test]
    fn conversions_preserve_small_constants() {
        assert_eq!(roundtrip::<f32>(0.5), 0.5);
        assert_eq!(roundtrip::<f64>(-1.25), -1.25);
    }
}
