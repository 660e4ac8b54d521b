//! Structured decoding for non-autoregressive sequence models.
//!
//! A non-autoregressive encoder-decoder predicts per-position label scores
//! in one parallel pass; a linear-chain CRF over those scores restores
//! output consistency. The CRF is made tractable for large vocabularies by
//! low-rank transition factors, per-position beam truncation (with gold
//! forcing during training), and optionally position-dependent dynamic
//! transitions. Exact DP routines and brute-force enumerations back every
//! approximation as oracles.

pub mod batch;
pub mod bench;
pub mod check;
pub mod crf;
pub mod data;
pub mod infer;
pub mod model;
pub mod tensor;
pub mod train;

pub use tensor::{Tensor, TensorError};
