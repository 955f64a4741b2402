use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating point element type of tensors and parameter stores.
///
/// Training runs in `f32`; gradient verification runs in `f64`.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Bit pattern widened to 64 bits, for exact equality checks.
    fn bits(self) -> u64;
    /// `exp` from `libm` regardless of features: `Float::exp` switches to the
    /// platform's implementation when something in the build enables `std`,
    /// which would make results depend on what else was compiled.
    fn exp_libm(self) -> Self;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
    #[inline]
    fn exp_libm(self) -> Self {
        libm::expf(self)
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn bits(self) -> u64 {
        self.to_bits()
    }
    #[inline]
    fn exp_libm(self) -> Self {
        libm::exp(self)
    }
}
