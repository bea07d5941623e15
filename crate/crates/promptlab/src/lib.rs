//! Desk-scale laboratory for generalizable prompt tuning over frozen
//! encoders.
//!
//! Learnable context vectors are optimized against a composite objective
//! that ensembles a fixed hand-crafted embedding view with the learnable
//! view via mutual-information maximization over a joint class-probability
//! matrix, and explores the visual side through class-wise mixup. Baseline
//! trainers (plain cross-entropy, embedding-distance regularization, and
//! gradient projection against a general-knowledge direction) plus a
//! base-to-new evaluation protocol round out the harness.
//!
//! Everything is seeded and deterministic: identical configuration
//! produces bit-identical reports. With the default `parallel` feature,
//! independent runs and per-sample evaluations fan out across threads via
//! rayon without changing any output byte.

#![forbid(unsafe_code)]

pub mod augment;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod objectives;
pub mod prompt;
pub mod report;
pub mod rng;
pub mod parallel;
pub mod store;
pub mod task;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{GradientMap, Graph, NodeId, Primitive};
pub use tensor::Tensor;
