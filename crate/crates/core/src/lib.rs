//! Desk-scale decoder-only transformer runtime for studying visual-token skipping.
//!
//! The crate implements a small but complete inference stack: a mock vision
//! encoder, token selection and merging, adaptive summary tokens, a causal
//! decoder with skip-FFN routing and prunable KV-cache, an analytical
//! MAC/parameter accountant cross-checked against instrumented matmuls, and an
//! error-bound analyzer that estimates per-layer Lipschitz constants and
//! verifies cumulative skip-error bounds numerically.
//!
//! Everything is deterministic for a fixed seed. The `parallel` feature
//! (default on) parallelizes seed fan-out, matmul rows, and pairwise
//! similarity with rayon; disabling it yields a bit-identical sequential
//! build.

#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod flops;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod par;
pub mod reduce;
pub mod summary;
pub mod tokens;

pub use error::{Error, Result};
pub use numerics::{MacCounter, Matrix, Scalar, Scope};
