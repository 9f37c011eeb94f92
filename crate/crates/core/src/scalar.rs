use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Numeric type the metric code is written against.
///
/// Implemented for every type with field arithmetic, an ordering and lossless
/// construction from counts: `f32`, `f64` and `num_rational::Ratio<i64>` all
/// qualify.
pub trait Scalar: Num + FromPrimitive + ToPrimitive + PartialOrd + Copy + Debug {
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    fn two() -> Self {
        Self::one() + Self::one()
    }
}

impl<T> Scalar for T where T: Num + FromPrimitive + ToPrimitive + PartialOrd + Copy + Debug {}
