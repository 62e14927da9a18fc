//! Progressive coarse-to-fine inference for vision transformers fed with
//! wavelet subband tokens.
//!
//! An image is converted to YCbCr and decomposed with a multi-level Haar
//! transform. The coarsest approximation band forms the first token group;
//! each finer level's detail bands form the next. The encoder processes one
//! group at a time under a cross-level causal mask, caching keys and values
//! so a refinement only pays for the new tokens. After every group a
//! readout is scored against class text embeddings and a confidence gate
//! decides whether to stop.

pub mod distill;
pub mod encoder;
pub mod error;
pub mod flopsmodel;
pub mod inference;
pub mod modelio;
pub mod numerics;
pub mod selfcheck;
pub mod tokenizer;
pub mod wavelet;

pub mod cli;

pub use error::{Error, Result};
