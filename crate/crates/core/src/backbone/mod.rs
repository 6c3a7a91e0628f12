//! Decoder-only transformer over byte tokens: embedding lookup, pre-norm
//! residual blocks (RMS-normalized causal self-attention and a GELU MLP),
//! and a final RMS normalization. Output is the last layer's hidden state
//! for every position; pooling turns that into one vector per text.

pub mod tokenizer;

pub use tokenizer::{tokenize, TokenBatch, TokenSequence, BOS_ID, EOS_ID, MIN_VOCAB, PAD_ID};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, TapeParams};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// How token positions enter the model. Rotary rotates query/key pairs at
/// attention time; learned-absolute adds a trained embedding per position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    #[default]
    Rope,
    LearnedAbsolute,
}

pub const RMS_EPS: f64 = 1e-6;
pub const ROPE_BASE: f64 = 10_000.0;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub positional: PositionalEncoding,
}

impl Default for BackboneConfig {
    /// Desk-scale configuration: trains in minutes on one core while keeping
    /// the training sequence budget at 512.
    fn default() -> Self {
        Self {
            vocab_size: MIN_VOCAB,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 512,
            seed: 42,
            positional: PositionalEncoding::Rope,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < MIN_VOCAB {
            return Err(Error::InvalidArgument(format!(
                "vocab_size {} below minimum {MIN_VOCAB} (256 bytes + 3 specials)",
                self.vocab_size
            )));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.positional == PositionalEncoding::Rope && (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "rotary encoding needs an even head dimension, got {}",
                self.d_model / self.n_heads
            )));
        }
        if self.max_seq_len < 1 {
            return Err(Error::InvalidArgument("max_seq_len must be >= 1".into()));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.d_model == 0 {
            return Err(Error::InvalidArgument(
                "n_layers, d_model, and d_ff must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Trainable parameter count implied by this configuration (backbone
    /// only, excluding any pooling head).
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d            // two norm gains
            + 4 * d * d + 4 * d          // q, k, v, o projections and biases
            + d * self.d_ff + self.d_ff  // mlp in
            + self.d_ff * d + d;         // mlp out
        let positional = match self.positional {
            PositionalEncoding::Rope => 0,
            PositionalEncoding::LearnedAbsolute => self.max_seq_len * d,
        };
        self.vocab_size * d + positional + self.n_layers * per_layer + d
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    attn_norm: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    mlp_norm: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Backbone parameter handles plus the forward pass. Weights live in the
/// shared [`ParamStore`]; this struct only remembers their ids.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    token_embedding: ParamId,
    position_embedding: Option<ParamId>,
    layers: Vec<LayerParams>,
    final_norm: ParamId,
}

/// Draw `n` values from normal(0, 0.02).
fn init_normal<S: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<S> {
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    (0..n).map(|_| S::from_f64(normal.sample(rng))).collect()
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Register all parameters in `store`, initialized deterministically
    /// from `cfg.seed`: normal(0, 0.02) projections and embeddings, zero
    /// biases, unit norm gains.
    pub fn register<S: Scalar>(cfg: BackboneConfig, store: &mut ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let token_embedding = store.add(
            "backbone.token_embedding",
            vec![cfg.vocab_size, d],
            init_normal(&mut rng, cfg.vocab_size * d),
        )?;
        let position_embedding = match cfg.positional {
            PositionalEncoding::Rope => None,
            PositionalEncoding::LearnedAbsolute => Some(store.add(
                "backbone.position_embedding",
                vec![cfg.max_seq_len, d],
                init_normal(&mut rng, cfg.max_seq_len * d),
            )?),
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |name: &str| format!("backbone.layer{l}.{name}");
            layers.push(LayerParams {
                attn_norm: store.add(p("attn_norm.gain"), vec![d], vec![S::one(); d])?,
                wq: store.add(p("attn.wq"), vec![d, d], init_normal(&mut rng, d * d))?,
                bq: store.add(p("attn.bq"), vec![d], vec![S::zero(); d])?,
                wk: store.add(p("attn.wk"), vec![d, d], init_normal(&mut rng, d * d))?,
                bk: store.add(p("attn.bk"), vec![d], vec![S::zero(); d])?,
                wv: store.add(p("attn.wv"), vec![d, d], init_normal(&mut rng, d * d))?,
                bv: store.add(p("attn.bv"), vec![d], vec![S::zero(); d])?,
                wo: store.add(p("attn.wo"), vec![d, d], init_normal(&mut rng, d * d))?,
                bo: store.add(p("attn.bo"), vec![d], vec![S::zero(); d])?,
                mlp_norm: store.add(p("mlp_norm.gain"), vec![d], vec![S::one(); d])?,
                w1: store.add(p("mlp.w1"), vec![d, cfg.d_ff], init_normal(&mut rng, d * cfg.d_ff))?,
                b1: store.add(p("mlp.b1"), vec![cfg.d_ff], vec![S::zero(); cfg.d_ff])?,
                w2: store.add(p("mlp.w2"), vec![cfg.d_ff, d], init_normal(&mut rng, cfg.d_ff * d))?,
                b2: store.add(p("mlp.b2"), vec![d], vec![S::zero(); d])?,
            });
        }
        let final_norm = store.add("backbone.final_norm.gain", vec![d], vec![S::one(); d])?;
        Ok(Self {
            cfg,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
        })
    }

    /// Final-layer hidden states for a padded batch: `[n, max_len, d_model]`.
    /// Causal masking plus per-row valid lengths keep padded positions out
    /// of attention; their hidden rows are garbage and every consumer must
    /// respect `batch.lengths`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        lease: &TapeParams,
        batch: &TokenBatch,
    ) -> Result<Tensor> {
        if batch.max_len > self.cfg.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of length {} exceeds max_seq_len {}",
                batch.max_len, self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        let eps = S::from_f64(RMS_EPS);
        let leading = [batch.n, batch.max_len];
        let mut x = tape.gather_rows(lease.get(self.token_embedding), &batch.ids, &leading)?;
        if let Some(pos_emb) = self.position_embedding {
            let positions: Vec<usize> = (0..batch.n)
                .flat_map(|_| 0..batch.max_len)
                .collect();
            let pos = tape.gather_rows(lease.get(pos_emb), &positions, &leading)?;
            x = tape.add(x, pos)?;
        }
        for layer in &self.layers {
            let normed = tape.rmsnorm_rows(x, lease.get(layer.attn_norm), eps)?;
            let q0 = tape.matmul(normed, lease.get(layer.wq))?;
            let mut q = tape.add_row_bias(q0, lease.get(layer.bq))?;
            let k0 = tape.matmul(normed, lease.get(layer.wk))?;
            let mut k = tape.add_row_bias(k0, lease.get(layer.bk))?;
            let v0 = tape.matmul(normed, lease.get(layer.wv))?;
            let v = tape.add_row_bias(v0, lease.get(layer.bv))?;
            if self.cfg.positional == PositionalEncoding::Rope {
                q = tape.rope(q, self.cfg.n_heads, ROPE_BASE)?;
                k = tape.rope(k, self.cfg.n_heads, ROPE_BASE)?;
            }
            let attn = tape.causal_attention(q, k, v, self.cfg.n_heads, &batch.lengths)?;
            let o0 = tape.matmul(attn, lease.get(layer.wo))?;
            let o = tape.add_row_bias(o0, lease.get(layer.bo))?;
            x = tape.add(x, o)?;

            let normed = tape.rmsnorm_rows(x, lease.get(layer.mlp_norm), eps)?;
            let h0 = tape.matmul(normed, lease.get(layer.w1))?;
            let h1 = tape.add_row_bias(h0, lease.get(layer.b1))?;
            let h2 = tape.gelu(h1)?;
            let h3 = tape.matmul(h2, lease.get(layer.w2))?;
            let h4 = tape.add_row_bias(h3, lease.get(layer.b2))?;
            x = tape.add(x, h4)?;
        }
        tape.rmsnorm_rows(x, lease.get(self.final_norm), eps)
    }
}
