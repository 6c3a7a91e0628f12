//! Training loop: batch forward, multi-resolution contrastive loss,
//! backward, clip, optimizer step; plus the `fit` driver that loops over
//! epochs, writes metrics, and checkpoints the result.

pub mod loss;
pub mod optimizer;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, SavedCheckpoint};
use crate::dataset::{make_batches, PairRecord, TrainingBatch};
use crate::error::{Error, Result};
use crate::model::{EmbedInput, EmbeddingModel};
use crate::params::TapeParams;
use crate::prefixes::Role;
use crate::scalar::Scalar;
use crate::tensor::Tape;

use loss::{matryoshka_loss, LossConfig};
use optimizer::{AdamW, OptimizerConfig};

/// Everything a training run needs besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
}

impl TrainConfig {
    /// Desk-scale defaults for a given width: 500 steps of batch 32.
    pub fn default_for(d_model: usize) -> Self {
        Self {
            steps: 500,
            batch_size: 32,
            seed: 42,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default_for(d_model),
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(
                "batch_size must be >= 2 for in-batch negatives".into(),
            ));
        }
        self.optimizer.validate()?;
        self.loss.validate(d_model)
    }
}

/// One step's observables, in the order they land in the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Forward + backward + update on one batch. The step index comes from the
/// optimizer's counter; failures name the step and the offending tensor.
pub fn train_step<S: Scalar>(
    model: &mut EmbeddingModel<S>,
    batch: &TrainingBatch,
    loss_cfg: &LossConfig,
    opt: &mut AdamW<S>,
) -> Result<StepReport> {
    let step = opt.next_step_index();
    let queries: Vec<EmbedInput> = batch
        .pairs
        .iter()
        .map(|p| EmbedInput {
            task: p.task,
            role: Role::Query,
            text: &p.query,
        })
        .collect();
    let docs: Vec<EmbedInput> = batch
        .pairs
        .iter()
        .map(|p| EmbedInput {
            task: p.task,
            role: Role::Document,
            text: &p.document,
        })
        .collect();
    let query_tokens = model.tokenize_inputs(&queries)?;
    let doc_tokens = model.tokenize_inputs(&docs)?;

    let mut tape = Tape::new();
    let lease = TapeParams::lease(&mut tape, &model.store)?;
    let q_raw = model.forward_raw(&mut tape, &lease, &query_tokens)?;
    let d_raw = model.forward_raw(&mut tape, &lease, &doc_tokens)?;
    let loss_t = matryoshka_loss(&mut tape, q_raw, d_raw, loss_cfg)?;
    let loss_val = tape.scalar_value(loss_t)?.to_f64();
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {step}")));
    }
    tape.backward(loss_t)?;
    let grads = lease.collect_grads(&tape, &model.store);
    for ((_, param), grad) in model.store.iter().zip(&grads) {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of '{}' at step {step}",
                param.name
            )));
        }
    }
    let stats = opt.step(&mut model.store, &grads)?;
    Ok(StepReport {
        step,
        loss: loss_val,
        grad_norm: stats.grad_norm,
        lr: stats.lr,
    })
}

/// Finite-difference check of d(loss)/d(parameter) through the whole
/// pipeline at f64: planted batch of 4 pairs, prefix + tokenize, 2-layer
/// d_model=8 backbone, the given pooling head, multi-resolution loss.
/// Samples `samples` parameter coordinates; see the report's
/// `pass_fraction` for how many matched.
pub fn end_to_end_gradient_report(
    kind: crate::pooling::PoolingKind,
    samples: usize,
    seed: u64,
    tolerance: f64,
) -> Result<crate::tensor::gradcheck::GradCheckReport> {
    use crate::backbone::BackboneConfig;
    use crate::model::PoolingSpec;
    use crate::tensor::gradcheck;

    let cfg = BackboneConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 64,
        seed,
        ..BackboneConfig::default()
    };
    let model = crate::model::EmbeddingModel::<f64>::new(cfg, PoolingSpec::new(kind))?;
    let pairs = crate::dataset::generate_planted(16, seed)?.train_pairs;
    let batch = TrainingBatch {
        pairs: pairs[..4].to_vec(),
    };
    let queries: Vec<EmbedInput> = batch
        .pairs
        .iter()
        .map(|p| EmbedInput {
            task: p.task,
            role: Role::Query,
            text: &p.query,
        })
        .collect();
    let docs: Vec<EmbedInput> = batch
        .pairs
        .iter()
        .map(|p| EmbedInput {
            task: p.task,
            role: Role::Document,
            text: &p.document,
        })
        .collect();
    let query_tokens = model.tokenize_inputs(&queries)?;
    let doc_tokens = model.tokenize_inputs(&docs)?;
    let loss_cfg = LossConfig::default_for(model.d_model());

    let leaves: Vec<(Vec<usize>, Vec<f64>)> = model
        .store
        .iter()
        .map(|(_, p)| (p.shape.clone(), p.data.clone()))
        .collect();
    gradcheck::check_sampled(
        &leaves,
        |tape, tensors| {
            let lease = TapeParams::from_tensors(tensors.to_vec());
            let q_raw = model.forward_raw(tape, &lease, &query_tokens)?;
            let d_raw = model.forward_raw(tape, &lease, &doc_tokens)?;
            matryoshka_loss(tape, q_raw, d_raw, &loss_cfg)
        },
        gradcheck::DEFAULT_H,
        &[tolerance],
        samples,
        seed,
    )
}

/// Result of a full `fit` run.
#[derive(Debug)]
pub struct FitOutcome {
    pub steps_run: usize,
    pub final_loss: f64,
    pub checkpoint: SavedCheckpoint,
}

#[derive(Serialize)]
struct TimingLine {
    step: usize,
    wall_ms: f64,
}

/// Runs `cfg.steps` training steps over reshuffled epochs of `pairs`,
/// writing `metrics.jsonl` (step, loss, grad norm, lr; deterministic for a
/// fixed seed), `timing.jsonl` (per-step wall time, kept out of the metrics
/// file so those stay byte-comparable across runs), and a final checkpoint,
/// all under `out_dir`. Calls `on_step` after every step.
pub fn fit(
    model: &mut EmbeddingModel<f32>,
    pairs: &[PairRecord],
    cfg: &TrainConfig,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepReport),
) -> Result<FitOutcome> {
    cfg.validate(model.d_model())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let timing_path = out_dir.join("timing.jsonl");
    let mut metrics = std::io::BufWriter::new(
        fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );
    let mut timing = std::io::BufWriter::new(
        fs::File::create(&timing_path).map_err(|e| Error::io(&timing_path, e))?,
    );

    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.store, cfg.steps)?;
    let mut last_loss = f64::NAN;
    let mut epoch = 0u64;
    'training: loop {
        let batches = make_batches(pairs, cfg.batch_size, cfg.seed, epoch)?;
        if batches.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no full batches of size {} from {} pairs",
                cfg.batch_size,
                pairs.len()
            )));
        }
        for batch in &batches {
            if opt.steps_taken() == cfg.steps {
                break 'training;
            }
            let begin = Instant::now();
            let report = train_step(model, batch, &cfg.loss, &mut opt)?;
            let wall_ms = begin.elapsed().as_secs_f64() * 1e3;
            let line = serde_json::to_string(&report).expect("report serializes");
            writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
            let tline = serde_json::to_string(&TimingLine {
                step: report.step,
                wall_ms,
            })
            .expect("timing serializes");
            writeln!(timing, "{tline}").map_err(|e| Error::io(&timing_path, e))?;
            last_loss = report.loss;
            on_step(&report);
        }
        if opt.steps_taken() == cfg.steps {
            break;
        }
        epoch += 1;
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    timing.flush().map_err(|e| Error::io(&timing_path, e))?;

    let checkpoint = checkpoint::save(out_dir, model, &cfg.loss)?;
    Ok(FitOutcome {
        steps_run: cfg.steps,
        final_loss: last_loss,
        checkpoint,
    })
}
