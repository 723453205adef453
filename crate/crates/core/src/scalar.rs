//! Numeric bound shared by every generic item in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` or `f64`.
///
/// Training math runs in `f64` (see [`crate::Tensor64`]); `f32` is what
/// checkpoints store.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

/// Left-to-right sum, kept explicit so reductions have a fixed order.
#[inline]
pub(crate) fn ordered_sum<T: Scalar>(xs: impl IntoIterator<Item = T>) -> T {
    let mut acc = T::zero();
    for x in xs {
        acc += x;
    }
    acc
}
