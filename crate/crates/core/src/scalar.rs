//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! The image math is written once against [`Scalar`] and instantiated for
//! `f32` (the pipeline and wire precision) and `f64` (reference checks).

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable for intensities, transmissions and airlight.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    /// Clamp into the closed unit interval. NaN maps to zero.
    #[inline]
    fn clamp01(self) -> Self {
        if self.is_nan() {
            Self::zero()
        } else {
            self.max(Self::zero()).min(Self::one())
        }
    }

    #[inline]
    fn in_unit_range(self) -> bool {
        self >= Self::zero() && self <= Self::one()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
