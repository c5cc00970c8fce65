//! Scalar abstraction for the numerical core.
//!
//! Every numerical routine in this crate is generic over a [`Scalar`] so the
//! whole stack can be instantiated at `f32` or `f64` (concrete aliases live at
//! the crate root). The trait deliberately builds on [`nalgebra::RealField`]
//! rather than `num_traits::Float`: the two traits expose colliding inherent
//! methods (`sqrt`, `abs`, ...) and mixing them makes generic call sites
//! ambiguous. The num-traits surface we actually need is the primitive
//! conversion pair [`FromPrimitive`]/[`ToPrimitive`].

use num_traits::{FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable throughout the crate.
///
/// Implemented for `f32` and `f64`.
pub trait Scalar:
    nalgebra::RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static
{
    /// Converts an `f64` literal (tolerances, grid spacings, tabulated
    /// constants) into the scalar type. Panics only if the literal is not
    /// representable, which cannot happen for finite literals in `f32`/`f64`.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 literal must convert to Scalar")
    }

    /// Converts a count into the scalar type (e.g. for averaging).
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("usize must convert to Scalar")
    }

    /// Lossy view as `f64` for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar must convert to f64")
    }

    /// Draws a standard normal variate of this scalar type.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}
