//! Desk-scale code embeddings: a byte-level decoder backbone with swappable
//! pooling heads, trained contrastively on (query, document) pairs and
//! evaluated with exact nearest-neighbour retrieval.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff on a flat tape, generic over
//!   [`Scalar`] (`f32` for training, `f64` for gradient checks).
//! - [`params`]: named trainable parameter storage shared by model and
//!   optimizer.
//! - [`prefixes`]: task instruction strings prepended to queries and
//!   documents before tokenization.
//! - [`backbone`]: byte tokenizer and causal transformer stack.
//! - [`pooling`]: last-token, mean, and latent-attention sequence pooling.
//! - [`model`]: backbone + pooling head glued into an embedding model.
//! - [`dataset`]: pair records, JSONL loading, deterministic batching, and
//!   the planted-pair synthetic corpus generator.
//! - [`trainer`]: InfoNCE and multi-width (matryoshka) losses, AdamW, the
//!   warmup/cosine schedule, and the training loop.
//! - [`checkpoint`]: manifest + raw-blob checkpoint format.
//! - [`evaluator`]: exact cosine search and ranking metrics (NDCG, MRR,
//!   recall), plus the pooling ablation runner.

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod params;
pub mod pooling;
pub mod prefixes;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
