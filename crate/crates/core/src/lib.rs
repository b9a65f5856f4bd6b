//! Deterministic simulator of personalized federated learning with
//! prototype-calibrated self-supervised representations.
//!
//! The pipeline has two stages. In the training stage, sampled clients run
//! local SGD on a contrastive loss augmented with prototype regularizers and
//! the server aggregates their updates, optionally down-weighting clients
//! whose encodings sit far from their prototypes. In the personalization
//! stage every client (including clients that never trained) fits a linear
//! head on top of the frozen encoder; the spread of the resulting accuracies
//! is the fairness measure.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod calibre;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federated;
pub mod model;
pub mod partition;
pub mod personalize;
pub mod rng;
pub mod ssl;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
