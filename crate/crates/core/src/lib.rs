//! Desk-scale laboratory for KV-cache pruning.
//!
//! The crate bundles a toy grouped-query-attention transformer (the
//! "teacher"), a paged KV cache with exact memory accounting, the KVzip and
//! KVzip+ repeat-prompt scoring oracles, lightweight surrogate predictors
//! distilled from those scores (KVzap), thresholded eviction policies with a
//! sliding window, a synthetic-task evaluation harness, and a closed-form
//! overhead calculator.

pub mod container;
pub mod error;
pub mod harness;
pub mod kvcache;
pub mod model;
pub mod numerics;
pub mod overhead;
pub mod policies;
pub mod rng;
pub mod scoring;
pub mod surrogate;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tensor};
