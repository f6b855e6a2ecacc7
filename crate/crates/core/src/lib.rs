//! Dual-group image tokenization for autoregressive generation.
//!
//! An image is encoded into two groups of discrete tokens: a short prefix of
//! *prologue* tokens read off learnable queries, and a grid of *visual* tokens
//! read off the patches. Only visual tokens feed the decoder, so only they
//! carry reconstruction gradients. Only prologue tokens carry gradients from
//! the jointly trained autoregressive (AR) prior. The crate contains the
//! tokenizer, the AR model, the two-stage training pipeline, guided sampling
//! and a diagnostics suite with exact enumeration oracles.
//!
//! The runnable programs under `examples/` walk through each capability.

pub mod ar;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod plot;
pub mod quantization;
pub mod sampling;
pub mod tokenizer;

pub use error::{Error, Result};
