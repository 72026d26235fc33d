//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every op applied to [`Var`] handles; [`Tape::backward`]
//! walks the record in reverse. Values live in [`Tensor`]s generic over
//! [`Real`], so the same graph runs in `f32` for training and `f64` for
//! finite-difference verification.

mod check;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheckReport, ParamCheck};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("{op}: {detail}")]
    InvalidAttr { op: &'static str, detail: String },
    #[error("{op}: numeric overflow (non-finite output)")]
    NonFinite { op: &'static str },
    #[error("backprop requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("function is not deterministic: two evaluations differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
}
