use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for every matrix in the crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Bytes per element in memory.
    const BYTES: usize;

    /// Lossy conversion from an `f64` literal or computed constant.
    fn of(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn of_usize(n: usize) -> Self {
        Self::of(n as f64)
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}
