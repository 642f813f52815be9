//! Deterministic training toolkit for warrant-selection models: a tape-based
//! autodiff core, a BiLSTM max-pooling sentence encoder, argument-comprehension
//! model heads, annealed Adam training, corpus handling with perturbation
//! experiments, and seed-sweep statistics.
//!
//! Everything is plain f64 CPU math with a hand-rolled splitmix64 generator so
//! that a given seed reproduces runs bit for bit across platforms.

pub mod autodiff;
pub mod corpus;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod heads;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
