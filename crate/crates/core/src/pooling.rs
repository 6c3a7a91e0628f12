//! Pooling heads that turn per-token hidden states into one embedding per
//! sequence.
//!
//! Three interchangeable kinds sit behind [`Pooler`]:
//!
//! * `last_token`: the hidden state at the final non-pad position,
//! * `mean`: average over non-pad positions,
//! * `latent_attention`: a bank of learned latent vectors cross-attends over
//!   the sequence, the per-latent contexts are averaged and passed through a
//!   small MLP.
//!
//! All kinds produce a raw (un-normalized) `[n, d_model]` embedding; callers
//! decide when to L2-normalize.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, TapeParams};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// Number of latent vectors in the default latent-attention head.
pub const DEFAULT_LATENT_COUNT: usize = 32;

/// Hidden width multiplier of the latent head's output MLP.
pub const LATENT_MLP_MULT: usize = 4;

/// Standard deviation for latent-head weight init.
const INIT_STD: f64 = 0.02;

/// Which pooling head reduces token states to a sequence embedding.
///
/// The serialized names (`last_token`, `mean`, `latent_attention`) are part
/// of the checkpoint and config format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    LastToken,
    Mean,
    LatentAttention,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 3] = [
        PoolingKind::LastToken,
        PoolingKind::Mean,
        PoolingKind::LatentAttention,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PoolingKind::LastToken => "last_token",
            PoolingKind::Mean => "mean",
            PoolingKind::LatentAttention => "latent_attention",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "last_token" => Ok(PoolingKind::LastToken),
            "mean" => Ok(PoolingKind::Mean),
            "latent_attention" => Ok(PoolingKind::LatentAttention),
            other => Err(Error::InvalidArgument(format!(
                "unknown pooling kind '{other}' (expected one of: last_token, mean, latent_attention)"
            ))),
        }
    }
}

impl std::fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Parameter count of the latent-attention head for a given width.
///
/// latents `[r, d]`, key/value projections `[d, d]` each, and an output MLP
/// `d -> 4d -> d` with biases.
pub fn latent_head_param_count(d_model: usize, latent_count: usize) -> usize {
    let d = d_model;
    let hidden = LATENT_MLP_MULT * d;
    latent_count * d + 2 * d * d + d * hidden + hidden + hidden * d + d
}

#[derive(Debug, Clone)]
struct LatentHead {
    latents: ParamId,
    wk: ParamId,
    wv: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// A pooling head bound to parameter ids in a [`ParamStore`].
///
/// `LastToken` and `Mean` own no parameters; `LatentAttention` registers its
/// weights under the `pooling.` name prefix.
#[derive(Debug, Clone)]
pub struct Pooler {
    kind: PoolingKind,
    d_model: usize,
    latent_count: usize,
    head: Option<LatentHead>,
}

impl Pooler {
    /// Registers the head's parameters (if any) and returns the pooler.
    ///
    /// The latent head draws its init from the same seed as the backbone but
    /// on a separate RNG stream, so adding the head never shifts backbone
    /// weights.
    pub fn register<S: Scalar>(
        kind: PoolingKind,
        d_model: usize,
        latent_count: usize,
        seed: u64,
        store: &mut ParamStore<S>,
    ) -> Result<Self> {
        if d_model == 0 {
            return Err(Error::InvalidArgument(
                "pooling requires d_model >= 1".into(),
            ));
        }
        if kind != PoolingKind::LatentAttention {
            return Ok(Self {
                kind,
                d_model,
                latent_count: 0,
                head: None,
            });
        }
        if latent_count == 0 {
            return Err(Error::InvalidArgument(
                "latent_attention pooling requires latent_count >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let normal = Normal::new(0.0, INIT_STD).expect("finite std");
        let mut init = |count: usize| -> Vec<S> {
            (0..count)
                .map(|_| S::from_f64(normal.sample(&mut rng)))
                .collect()
        };
        let d = d_model;
        let hidden = LATENT_MLP_MULT * d;
        let latents = store.add("pooling.latents", vec![latent_count, d], init(latent_count * d))?;
        let wk = store.add("pooling.wk", vec![d, d], init(d * d))?;
        let wv = store.add("pooling.wv", vec![d, d], init(d * d))?;
        let w1 = store.add("pooling.mlp.w1", vec![d, hidden], init(d * hidden))?;
        let b1 = store.add("pooling.mlp.b1", vec![hidden], vec![S::default(); hidden])?;
        let w2 = store.add("pooling.mlp.w2", vec![hidden, d], init(hidden * d))?;
        let b2 = store.add("pooling.mlp.b2", vec![d], vec![S::default(); d])?;
        Ok(Self {
            kind,
            d_model,
            latent_count,
            head: Some(LatentHead {
                latents,
                wk,
                wv,
                w1,
                b1,
                w2,
                b2,
            }),
        })
    }

    pub fn kind(&self) -> PoolingKind {
        self.kind
    }

    /// Latent count for latent-attention poolers, 0 otherwise.
    pub fn latent_count(&self) -> usize {
        self.latent_count
    }

    /// Number of parameters this pooler registered.
    pub fn param_count(&self) -> usize {
        match self.kind {
            PoolingKind::LastToken | PoolingKind::Mean => 0,
            PoolingKind::LatentAttention => {
                latent_head_param_count(self.d_model, self.latent_count)
            }
        }
    }

    /// Reduces hidden states `[n, l, d_model]` to raw embeddings
    /// `[n, d_model]`, honoring per-sequence valid lengths.
    ///
    /// Pad positions at or beyond each sequence's length never influence the
    /// output, bit for bit.
    pub fn pool<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        lease: &TapeParams,
        hidden: Tensor,
        lengths: &[usize],
    ) -> Result<Tensor> {
        let shape = tape.shape(hidden).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(Error::shape(
                "pool",
                format!(
                    "expected hidden states [n, l, {}], got {:?}",
                    self.d_model, shape
                ),
            ));
        }
        let (n, l) = (shape[0], shape[1]);
        if lengths.len() != n {
            return Err(Error::shape(
                "pool",
                format!("{} sequences but {} lengths", n, lengths.len()),
            ));
        }
        for (i, &len) in lengths.iter().enumerate() {
            if len == 0 || len > l {
                return Err(Error::InvalidArgument(format!(
                    "pool: sequence {i} has invalid length {len} (padded length {l})"
                )));
            }
        }
        match self.kind {
            PoolingKind::LastToken => {
                let positions: Vec<usize> = lengths.iter().map(|&len| len - 1).collect();
                tape.select_positions(hidden, &positions)
            }
            PoolingKind::Mean => tape.masked_mean_rows(hidden, lengths),
            PoolingKind::LatentAttention => self.pool_latent(tape, lease, hidden, lengths),
        }
    }

    fn pool_latent<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        lease: &TapeParams,
        hidden: Tensor,
        lengths: &[usize],
    ) -> Result<Tensor> {
        let head = self
            .head
            .as_ref()
            .expect("latent_attention pooler always holds head params");
        let keys = tape.matmul(hidden, lease.get(head.wk))?;
        let values = tape.matmul(hidden, lease.get(head.wv))?;
        let scores = tape.bmm_broadcast_nt(lease.get(head.latents), keys)?;
        let scale = S::from_f64(1.0 / (self.d_model as f64).sqrt());
        let scores = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax_last(scores, lengths)?;
        let context = tape.bmm(probs, values)?;
        let pooled = tape.mean_dim1(context)?;
        let h = tape.matmul(pooled, lease.get(head.w1))?;
        let h = tape.add_row_bias(h, lease.get(head.b1))?;
        let h = tape.gelu(h)?;
        let out = tape.matmul(h, lease.get(head.w2))?;
        tape.add_row_bias(out, lease.get(head.b2))
    }
}
