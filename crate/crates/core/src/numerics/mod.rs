//! Dense linear algebra and statistics used by the model, the steering
//! engine and the analyses.

pub mod kernels;
mod pca;
mod stats;
mod tensor;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub use pca::{
    principal_direction, principal_direction_with, Centering, DeltaMatrix, PrincipalDirection,
    POWER_MAX_ITERATIONS, POWER_TOLERANCE,
};
pub use stats::feature_stats;
pub(crate) use stats::mean_and_variance;
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout.
pub const LN_EPS: f32 = 1e-5;

/// Scalar type the kernels and the model are generic over (`f32`, `f64`).
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// Widen (or keep) a stored `f32` value.
    fn lift(v: f32) -> Self;
    /// Narrow to `f32` storage.
    fn lower(self) -> f32;
}

impl Real for f32 {
    fn lift(v: f32) -> Self {
        v
    }
    fn lower(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn lift(v: f32) -> Self {
        f64::from(v)
    }
    fn lower(self) -> f32 {
        self as f32
    }
}
