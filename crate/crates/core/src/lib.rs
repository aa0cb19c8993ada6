//! Multi-head fused transformer for multi-modal, multi-label occurrence
//! detection.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`rng`], [`params`], [`gradcheck`]: dense `f64`
//!   arrays, define-by-run reverse-mode differentiation, seeded random
//!   streams, named parameter storage and a finite-difference oracle.
//! - [`model`]: AU embeddings, transformer encoder stages, fusion
//!   transformers, classifiers and the variants evaluated by the harness.
//! - [`training`]: weighted BCE, the combined two-head loss, SGD with
//!   momentum, the step schedule and the epoch loop.
//! - [`data`]: manifest ingestion, z-score standardization, subject-exclusive
//!   folds and the synthetic generator.
//! - [`metrics`]: per-AU F1, reports, cross-validation and ablation suites.

// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positives.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod keyvalue;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::ParameterStore;
pub use tensor::Tensor;
