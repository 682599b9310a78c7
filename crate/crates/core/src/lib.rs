//! Uncertainty-aware, compressed hybrid language model inference.
//!
//! A device-side model drafts tokens; a server-side model verifies them by
//! speculative rejection sampling. The device skips uplink when it is
//! confident and otherwise sends a truncated vocabulary distribution.

// `!(x > 0.0)` is used on purpose so NaN inputs are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod channel;
pub mod compression;
pub mod config;
pub mod dist;
pub mod error;
pub mod kde;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod specdec;
pub mod uncertainty;
pub mod verification;

pub use error::{Error, Result};
