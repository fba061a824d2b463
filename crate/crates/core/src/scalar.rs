//! Scalar abstraction shared by the numerical core.
//!
//! Feature evaluation, the sparse regression solver and the fidelity metrics
//! are written against [`Real`] so they run in either `f32` or `f64`.
//! Environments, datasets and the saved-model format are `f64` throughout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the regression and feature code.
pub trait Real: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static {
    /// Converts an `f64` literal or configuration value into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }
}

impl<T> Real for T where T: Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_round_trip_for_both_widths() {
        assert_eq!(<f64 as Real>::lit(0.25), 0.25);
        assert_eq!(<f32 as Real>::lit(0.25), 0.25f32);
        assert_eq!(<f64 as Real>::from_count(7), 7.0);
    }
}
