use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type of a [`super::Tensor`]: an IEEE float plus the conversions
/// and iterator support the math in this crate needs.
///
/// Everything in `numerics` is written against this trait; the rest of the
/// crate pins it to `f64` through the aliases at the crate root (gradient
/// checks drive the tolerances, and they want the full 53-bit mantissa).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum<Self> + Debug + Display + Default + 'static
{
    /// Convert an `f64` literal into `Self`. Panics only on literals that do
    /// not fit, which for f32/f64 never happens with finite constants.
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
