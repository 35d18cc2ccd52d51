//! Continual test-time adaptation by fusing a frozen generalist classifier
//! with a small trainable adapter.
//!
//! The adapter learns only its normalization affine parameters, supervised by
//! the fused prediction, and is partially restored to its source weights
//! whenever the direction of its parameter updates turns against the recent
//! trend.

pub mod error;
pub mod adapter;
pub mod fusion;
pub mod linalg;
pub mod objectives;
pub mod streamgen;
pub mod generalist;
pub mod drift;
pub mod harness;

pub use error::{Result, SailError};
