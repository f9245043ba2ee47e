use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

/// Element type of tensors. Tests and oracles run in `f64`; training may run
/// in `f32` for speed. Gradient checks always use `f64` — finite differences
/// drown in rounding noise at single precision.
pub trait Scalar:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Snap to the nearest f32-representable value. Parameters are kept
    /// f32-representable so checkpoints (stored as f32) round-trip bit-exactly.
    fn snap_f32(self) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn snap_f32(self) -> Self {
        self
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn snap_f32(self) -> Self {
        self as f32 as f64
    }
}
