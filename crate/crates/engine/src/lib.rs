//! Minimal dense-tensor numerics with a Wengert tape for reverse-mode
//! automatic differentiation.
//!
//! The tape records every operation of a forward pass together with its
//! output value. [`Tape::backward`] replays it in reverse, optionally under a
//! [`HookSet`] that can rescale the adjoints flowing into residual branches or
//! overwrite individual rows of the adjoint at a labelled node before
//! propagation continues below it.
//!
//! Precision is selected through the [`Scalar`] type parameter: `f32` for
//! experiments, `f64` for finite-difference oracles.

mod backward;
mod check;
mod error;
mod scalar;
mod tape;
mod tensor;

pub use backward::{
    GradReplacement, Gradients, HookSet, Replacement, ReplacementEvent, ReplacementRule,
};
pub use check::{cosine_similarity, finite_diff_entries, finite_diff_grad};
pub use error::{EngineError, Result};
pub use scalar::Scalar;
pub use tape::{Label, NodeId, OpKind, Tape};
pub use tensor::Tensor;

/// Denominator guard shared by every normalisation in the crate and its
/// dependants. Below it, callers get an explicit "undefined" result.
pub const DENOM_EPS: f64 = 1e-12;
