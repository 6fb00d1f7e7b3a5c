//! Word-embedding compression for multi-task NLU models.
//!
//! The crate covers compositional-code (additive quantization) compression
//! trained either as a post-processing autoencoder or end-to-end with the
//! downstream model, SVD and 8-bit quantization baselines, a BiLSTM + CRF
//! multi-task NLU model, a synthetic corpus generator, and the evaluation
//! harness that compares them.

pub mod binio;
pub mod datagen;
pub mod dccl;
pub mod embio;
pub mod error;
pub mod eval;
pub mod nlu;
pub mod numerics;
pub mod quant8;
pub mod svdcomp;
pub mod sweep;
#[doc(hidden)]
pub mod testing;
pub mod train;

pub use error::{Error, Result};
