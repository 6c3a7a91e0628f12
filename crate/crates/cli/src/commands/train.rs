//! `codevec train`: fit a model on contrastive pairs, writing the metrics
//! log, per-step timing, a config echo, and the final checkpoint under
//! `--out`.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use codevec_core::dataset::load_pairs;
use codevec_core::model::EmbeddingModel;
use codevec_core::trainer::fit;

use crate::config::RunConfig;
use crate::output::OutputGuard;

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let resolved = RunConfig::load(args.config.as_deref())?.resolve(args.seed)?;
    let data = args
        .data
        .clone()
        .or(resolved.data.train_pairs.clone())
        .context("no training data: pass --data or set [data] train_pairs in the config")?;
    let pairs = load_pairs(&data)?;

    let mut guard = OutputGuard::new();
    guard.create_dir(&args.out)?;
    for name in [
        "run_config.toml",
        "metrics.jsonl",
        "timing.jsonl",
        "model.json",
        "model.bin",
    ] {
        guard.track(args.out.join(name));
    }
    fs::write(args.out.join("run_config.toml"), resolved.echo_toml())?;

    let mut model = EmbeddingModel::<f32>::new(resolved.backbone, resolved.pooling)?;
    println!(
        "training {} parameters ({} pooling) on {} pairs for {} steps of batch {}",
        model.param_count(),
        model.pooler.kind(),
        pairs.len(),
        resolved.train.steps,
        resolved.train.batch_size,
    );

    let begin = Instant::now();
    let total = resolved.train.steps;
    let outcome = fit(&mut model, &pairs, &resolved.train, &args.out, |r| {
        if r.step == 1 || r.step % 25 == 0 || r.step == total {
            println!(
                "step {:>5}/{total} loss {:.4} grad {:.3} lr {:.3e}",
                r.step, r.loss, r.grad_norm, r.lr
            );
        }
    })?;

    println!(
        "finished in {:.1}s; final loss {:.4}; checkpoint {} under {}",
        begin.elapsed().as_secs_f64(),
        outcome.final_loss,
        outcome.checkpoint.model_id,
        args.out.display(),
    );
    guard.disarm();
    Ok(())
}
