use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar used by the numeric core: `f32` or `f64`.
///
/// Reductions that sum many products go through [`Scalar::widen`] so that
/// accumulation happens in 64-bit precision regardless of the storage type.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    #[inline]
    fn widen(self) -> f64 {
        // f32 and f64 always convert
        self.to_f64().unwrap()
    }

    #[inline]
    fn narrow(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn lit(v: f64) -> Self {
        Self::narrow(v)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
