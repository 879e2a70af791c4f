//! Differentiable dense-array operations, the optimizer, and gradient
//! verification tooling.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod real;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{DeadRows, Gradients, Graph, Var};
pub use ops::{linear, masked_scaled_attention, AttentionOutput};
pub use real::{Dtype, Real};
pub use tensor::{matmul, Tensor};

use thiserror::Error;

/// Default layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("{op} produced NaN or Inf")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has no allowed entries")]
    FullyMaskedRow { row: usize },
    #[error("gradient {index} contains NaN or Inf")]
    NonFiniteGradient { index: usize },
    #[error("gradient {index} does not match its parameter shape")]
    GradShapeMismatch { index: usize },
    #[error("loss function is not deterministic across evaluations")]
    NonDeterministicLoss,
    #[error("expected a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
