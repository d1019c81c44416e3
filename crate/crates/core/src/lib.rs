//! Decomposed GPT-2 self-attention and attention-shift predictors of reading times.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] holds the dense kernels used by the forward pass.
//! * [`model`] loads GPT-2 checkpoints and records an [`AttentionTrace`] for one layer.
//! * [`formulations`] turns a trace into attention-weight distributions (raw weights,
//!   value-norm weights and residual + LayerNorm aware norm weights).
//! * [`predictors`] computes entropy and distance measures over those distributions,
//!   including a transportation-simplex earth mover's distance.
//! * [`tokenizer`] is a byte-level BPE compatible with GPT-2 vocabularies.
//! * [`pipeline`] runs whole documents through sliding context windows.
//! * [`stats`] evaluates the predictors against reading-time data.
//! * [`selftest`] runs the invariant suite against seeded random models.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod formulations;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod predictors;
pub mod selftest;
pub mod stats;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use formulations::{Formulation, WeightVector};
pub use model::{AttentionTrace, Model, ModelConfig, ModelWeights};
pub use par::Execution;
pub use pipeline::{Document, PipelineOptions};
pub use predictors::{Measure, PredictorTable};
pub use tensor::{Matrix, Precision, Scalar};
pub use tokenizer::BpeVocab;
