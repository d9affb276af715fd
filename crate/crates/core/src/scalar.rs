//! Floating-point abstraction used by the embedding and similarity kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar type an embedding can be stored in.
///
/// Implemented for `f32` and `f64`. Thresholds elsewhere in the pipeline are
/// plain `f64`; kernels convert with [`Scalar::to_f64_lossy`] at the boundary.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Absolute slack allowed when checking range invariants in this precision.
    fn range_slack() -> Self;
}

impl Scalar for f32 {
    fn range_slack() -> Self {
        1e-5
    }
}

impl Scalar for f64 {
    fn range_slack() -> Self {
        1e-12
    }
}
