//! The embedding model: task prefix + byte tokenizer + decoder backbone +
//! pooling head, with helpers for batched inference and multi-resolution
//! output widths.

use serde::{Deserialize, Serialize};

use crate::backbone::tokenizer::{tokenize, TokenBatch, TokenSequence};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::params::{ParamStore, TapeParams};
use crate::pooling::{Pooler, PoolingKind, DEFAULT_LATENT_COUNT};
use crate::prefixes::{apply_prefix, Role, TaskType};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Inference batches are processed this many sequences at a time.
pub const EMBED_CHUNK: usize = 32;

/// Pooling head selection plus its one size knob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub kind: PoolingKind,
    #[serde(default = "default_latent_count")]
    pub latent_count: usize,
}

fn default_latent_count() -> usize {
    DEFAULT_LATENT_COUNT
}

impl Default for PoolingSpec {
    fn default() -> Self {
        Self {
            kind: PoolingKind::LastToken,
            latent_count: DEFAULT_LATENT_COUNT,
        }
    }
}

impl PoolingSpec {
    pub fn new(kind: PoolingKind) -> Self {
        Self {
            kind,
            latent_count: DEFAULT_LATENT_COUNT,
        }
    }
}

/// One text to embed: the task/role pair picks the instruction prefix.
#[derive(Debug, Clone, Copy)]
pub struct EmbedInput<'a> {
    pub task: TaskType,
    pub role: Role,
    pub text: &'a str,
}

/// Backbone plus pooling head over a shared parameter store.
#[derive(Debug)]
pub struct EmbeddingModel<S: Scalar> {
    pub store: ParamStore<S>,
    pub backbone: Backbone,
    pub pooler: Pooler,
}

impl<S: Scalar> EmbeddingModel<S> {
    pub fn new(backbone_cfg: BackboneConfig, pooling: PoolingSpec) -> Result<Self> {
        let mut store = ParamStore::new();
        let backbone = Backbone::register(backbone_cfg, &mut store)?;
        let pooler = Pooler::register(
            pooling.kind,
            backbone.config().d_model,
            pooling.latent_count,
            backbone.config().seed,
            &mut store,
        )?;
        Ok(Self {
            store,
            backbone,
            pooler,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn d_model(&self) -> usize {
        self.backbone.config().d_model
    }

    pub fn pooling_spec(&self) -> PoolingSpec {
        PoolingSpec {
            kind: self.pooler.kind(),
            latent_count: self.pooler.latent_count(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.backbone.config().param_count() + self.pooler.param_count()
    }

    /// Prefix, tokenize, and right-pad a batch of inputs.
    pub fn tokenize_inputs(&self, inputs: &[EmbedInput<'_>]) -> Result<TokenBatch> {
        let max_seq_len = self.backbone.config().max_seq_len;
        let seqs: Vec<TokenSequence> = inputs
            .iter()
            .map(|input| tokenize(&apply_prefix(input.task, input.role, input.text), max_seq_len))
            .collect();
        TokenBatch::new(&seqs)
    }

    /// Forward pass on an existing tape: token batch to raw (un-normalized)
    /// embeddings `[n, d_model]`.
    pub fn forward_raw(
        &self,
        tape: &mut Tape<S>,
        lease: &TapeParams,
        batch: &TokenBatch,
    ) -> Result<Tensor> {
        let hidden = self.backbone.forward(tape, lease, batch)?;
        self.pooler.pool(tape, lease, hidden, &batch.lengths)
    }

    /// Gradient-free batch embedding. Returns one raw `d_model`-wide vector
    /// per input, independent of how inputs are chunked internally.
    pub fn embed_raw(&self, inputs: &[EmbedInput<'_>]) -> Result<Vec<Vec<S>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(EMBED_CHUNK) {
            let batch = self.tokenize_inputs(chunk)?;
            let mut tape = Tape::new();
            let lease = TapeParams::lease_frozen(&mut tape, &self.store)?;
            let raw = self.forward_raw(&mut tape, &lease, &batch)?;
            let data = tape.data(raw);
            let d = self.d_model();
            for row in 0..chunk.len() {
                out.push(data[row * d..(row + 1) * d].to_vec());
            }
        }
        Ok(out)
    }

    /// Embeds inputs and finalizes each vector at the requested width.
    pub fn embed(&self, inputs: &[EmbedInput<'_>], dims: usize) -> Result<Vec<Vec<S>>> {
        let raw = self.embed_raw(inputs)?;
        raw.iter()
            .map(|row| truncate_renormalize(row, dims))
            .collect()
    }
}

/// Keep the first `dims` components and L2-normalize the result.
///
/// Matryoshka reads: the served low-width vector is exactly the renormalized
/// prefix of the full-width raw embedding. Errors if the prefix has zero
/// norm or `dims` is out of range.
pub fn truncate_renormalize<S: Scalar>(raw: &[S], dims: usize) -> Result<Vec<S>> {
    if dims == 0 || dims > raw.len() {
        return Err(Error::InvalidArgument(format!(
            "requested width {dims} outside 1..={}",
            raw.len()
        )));
    }
    let prefix = &raw[..dims];
    let norm = prefix
        .iter()
        .map(|&x| x * x)
        .fold(S::default(), |acc, x| acc + x)
        .sqrt();
    if !(norm > S::default()) || !norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "cannot normalize embedding prefix of width {dims}: norm {norm}"
        )));
    }
    Ok(prefix.iter().map(|&x| x / norm).collect())
}
