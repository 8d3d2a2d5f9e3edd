//! Desk-scale end-to-end speech recognition.
//!
//! The crate covers the full pipeline: log-mel feature extraction, a
//! character vocabulary, BLSTM and Conformer encoders over a small
//! reverse-mode autodiff engine, CTC / transducer / attention losses with
//! exact gradients, greedy and beam search decoding, a training loop with
//! SpecAugment, variational noise and parameter EMA, and a benchmark
//! harness for CER, training throughput, and decoding real-time factor.

pub mod augment;
pub mod error;
pub mod features;
pub mod loss;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod search;
pub mod tensor;
pub mod toydata;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
