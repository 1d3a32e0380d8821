//! Stateful output-perturbation defense against model extraction.
//!
//! The defender trains a protectee classifier, maps its penultimate features
//! to a 2D space with a contrastively trained mapper, and measures how much of
//! each class's central region a query stream has explored. Once a class's
//! cumulative sensitivity passes a threshold, central queries receive
//! gradient-reversed confidence vectors; peripheral queries are answered with
//! a boundary-shifted softmax that keeps the predicted label.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod certification;
pub mod data;
pub mod error;
pub mod ks;
pub mod mapper;
pub mod nn;
pub mod perturbation;
pub mod pipeline;
pub mod sensitivity;
pub mod simplex;
pub mod snapshot;
pub mod special;

pub use error::{QueenError, Result};
pub use nn::{
    argmax, softmax, Activation, Batch, ConfidenceVector, LossKind, Mlp, NetworkSpec, TrainConfig,
};
pub use sensitivity::{ClassProfile, Condition, QueryRegistry};
