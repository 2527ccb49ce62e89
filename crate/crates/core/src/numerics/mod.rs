//! Dense `f32` arrays, forward kernels, and a tape for reverse-mode
//! gradients.

mod array;
pub mod layers;
pub mod ops;
mod params;
mod tape;

use thiserror::Error;

pub use array::Array;
pub use params::{GradStore, ParamGroup, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("probability must lie in [0, 1), got {0}")]
    InvalidProbability(f32),
    #[error("model dimension {d_model} is not divisible by {heads} heads")]
    IndivisibleHeads { d_model: usize, heads: usize },
    #[error("every target position is ignored")]
    AllIgnored,
    #[error("loss does not depend on any trainable value")]
    DetachedGraph,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
