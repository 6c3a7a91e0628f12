//! Run configuration. A TOML file with five optional sections (`backbone`,
//! `pooling`, `train`, `optimizer`, `loss`, plus `data` for default paths);
//! every key is optional and falls back to the library default, so a config
//! file only has to say what it changes. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use codevec_core::backbone::{BackboneConfig, PositionalEncoding};
use codevec_core::model::PoolingSpec;
use codevec_core::pooling::PoolingKind;
use codevec_core::trainer::loss::{LossConfig, LossDirection};
use codevec_core::trainer::optimizer::OptimizerConfig;
use codevec_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub pooling: PoolingSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub data: DataSection,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub vocab_size: Option<usize>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_seq_len: Option<usize>,
    pub seed: Option<u64>,
    pub positional: Option<PositionalEncoding>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingSection {
    pub kind: Option<PoolingKind>,
    pub latent_count: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub warmup_frac: Option<f64>,
    pub final_lr_frac: Option<f64>,
    pub clip_norm: Option<f64>,
    pub frozen_prefixes: Option<Vec<String>>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub temperature: Option<f64>,
    pub matryoshka_dims: Option<Vec<usize>>,
    pub matryoshka_weights: Option<Vec<f64>>,
    pub direction: Option<LossDirection>,
}

/// Default input paths, so a run config can be self-contained. Command-line
/// flags override these.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_pairs: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
}

/// A fully materialized configuration, every default applied.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub backbone: BackboneConfig,
    pub pooling: PoolingSpec,
    pub train: TrainConfig,
    pub data: DataSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Load from `path` when given, else start from an all-defaults config.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_path(p),
            None => Ok(Self::default()),
        }
    }

    /// Apply defaults and the optional `--seed` override (which sets both
    /// the backbone init seed and the batch-shuffle seed), then validate.
    pub fn resolve(&self, seed_override: Option<u64>) -> Result<Resolved> {
        let base = BackboneConfig::default();
        let backbone = BackboneConfig {
            vocab_size: self.backbone.vocab_size.unwrap_or(base.vocab_size),
            d_model: self.backbone.d_model.unwrap_or(base.d_model),
            n_layers: self.backbone.n_layers.unwrap_or(base.n_layers),
            n_heads: self.backbone.n_heads.unwrap_or(base.n_heads),
            d_ff: self.backbone.d_ff.unwrap_or(base.d_ff),
            max_seq_len: self.backbone.max_seq_len.unwrap_or(base.max_seq_len),
            seed: seed_override
                .or(self.backbone.seed)
                .unwrap_or(base.seed),
            positional: self.backbone.positional.unwrap_or(base.positional),
        };

        let pooling = PoolingSpec {
            kind: self.pooling.kind.unwrap_or(PoolingKind::LastToken),
            latent_count: self
                .pooling
                .latent_count
                .unwrap_or(codevec_core::pooling::DEFAULT_LATENT_COUNT),
        };

        let loss_base = LossConfig::default_for(backbone.d_model);
        let dims = self
            .loss
            .matryoshka_dims
            .clone()
            .unwrap_or(loss_base.matryoshka_dims);
        let weights = match &self.loss.matryoshka_weights {
            Some(w) => w.clone(),
            None => vec![1.0 / dims.len() as f64; dims.len()],
        };
        let loss = LossConfig {
            temperature: self.loss.temperature.unwrap_or(loss_base.temperature),
            matryoshka_dims: dims,
            matryoshka_weights: weights,
            direction: self.loss.direction.unwrap_or(loss_base.direction),
        };

        let opt_base = OptimizerConfig::default();
        let optimizer = OptimizerConfig {
            lr: self.optimizer.lr.unwrap_or(opt_base.lr),
            weight_decay: self.optimizer.weight_decay.unwrap_or(opt_base.weight_decay),
            beta1: self.optimizer.beta1.unwrap_or(opt_base.beta1),
            beta2: self.optimizer.beta2.unwrap_or(opt_base.beta2),
            eps: self.optimizer.eps.unwrap_or(opt_base.eps),
            warmup_frac: self.optimizer.warmup_frac.unwrap_or(opt_base.warmup_frac),
            final_lr_frac: self
                .optimizer
                .final_lr_frac
                .unwrap_or(opt_base.final_lr_frac),
            clip_norm: self.optimizer.clip_norm.unwrap_or(opt_base.clip_norm),
            frozen_prefixes: self
                .optimizer
                .frozen_prefixes
                .clone()
                .unwrap_or(opt_base.frozen_prefixes),
        };

        let train_base = TrainConfig::default_for(backbone.d_model);
        let train = TrainConfig {
            steps: self.train.steps.unwrap_or(train_base.steps),
            batch_size: self.train.batch_size.unwrap_or(train_base.batch_size),
            seed: seed_override.or(self.train.seed).unwrap_or(train_base.seed),
            optimizer,
            loss,
        };
        train
            .validate(backbone.d_model)
            .context("invalid run config")?;

        Ok(Resolved {
            backbone,
            pooling,
            train,
            data: self.data.clone(),
        })
    }
}

/// Serialized echo of a resolved config, in the same section layout the
/// input file uses, so the echo is itself a loadable config.
#[derive(Serialize)]
struct Echo<'a> {
    backbone: &'a BackboneConfig,
    pooling: PoolingEcho,
    train: TrainEcho,
    optimizer: &'a OptimizerConfig,
    loss: &'a LossConfig,
}

#[derive(Serialize)]
struct PoolingEcho {
    kind: PoolingKind,
    latent_count: usize,
}

#[derive(Serialize)]
struct TrainEcho {
    steps: usize,
    batch_size: usize,
    seed: u64,
}

impl Resolved {
    pub fn echo_toml(&self) -> String {
        let echo = Echo {
            backbone: &self.backbone,
            pooling: PoolingEcho {
                kind: self.pooling.kind,
                latent_count: self.pooling.latent_count,
            },
            train: TrainEcho {
                steps: self.train.steps,
                batch_size: self.train.batch_size,
                seed: self.train.seed,
            },
            optimizer: &self.train.optimizer,
            loss: &self.train.loss,
        };
        toml::to_string_pretty(&echo).expect("config serializes")
    }
}
