//! `codevec ablate`: train one model per pooling kind under an identical
//! recipe and emit the comparison table, per-arm checkpoints, and per-arm
//! batch logs under `--out`.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{Context, Result};
use codevec_core::checkpoint;
use codevec_core::dataset::{load_pairs, RetrievalDataset};
use codevec_core::evaluator::run_ablation;
use codevec_core::pooling::PoolingKind;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::OutputGuard;

pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    /// Pooling kinds to compare; empty means all three.
    pub kinds: Vec<String>,
}

#[derive(Serialize)]
struct BatchLine<'a> {
    step: usize,
    ids: &'a [String],
}

pub fn run(args: &AblateArgs) -> Result<()> {
    let resolved = RunConfig::load(args.config.as_deref())?.resolve(args.seed)?;
    let data = args
        .data
        .clone()
        .or(resolved.data.train_pairs.clone())
        .context("no training data: pass --data or set [data] train_pairs in the config")?;
    let heldout_dir = args
        .heldout
        .clone()
        .or(resolved.data.heldout.clone())
        .context("no held-out dataset: pass --heldout or set [data] heldout in the config")?;
    let pairs = load_pairs(&data)?;
    let heldout = RetrievalDataset::load(&heldout_dir)?;

    let kinds: Vec<PoolingKind> = if args.kinds.is_empty() {
        PoolingKind::ALL.to_vec()
    } else {
        args.kinds
            .iter()
            .map(|k| PoolingKind::from_label(k))
            .collect::<codevec_core::Result<_>>()?
    };

    println!(
        "ablating {} pooling kinds: {} steps each on {} pairs, seed {}",
        kinds.len(),
        resolved.train.steps,
        pairs.len(),
        resolved.train.seed,
    );
    let total = resolved.train.steps;
    let outcome = run_ablation(
        &pairs,
        &heldout,
        &resolved.backbone,
        &resolved.train,
        &kinds,
        |kind, r| {
            if r.step == 1 || r.step % 50 == 0 || r.step == total {
                println!("[{kind}] step {:>5}/{total} loss {:.4}", r.step, r.loss);
            }
        },
    )?;

    let mut guard = OutputGuard::new();
    guard.create_dir(&args.out)?;
    let table_path = args.out.join("ablation.txt");
    let csv_path = args.out.join("ablation.csv");
    guard.track(&table_path);
    guard.track(&csv_path);
    fs::write(&table_path, outcome.report.render_table())?;
    fs::write(&csv_path, outcome.report.render_csv())?;

    for (arm, (kind, model)) in outcome.report.arms.iter().zip(&outcome.models) {
        let arm_dir = args.out.join("arms").join(kind.label());
        guard.create_dir(&arm_dir)?;
        checkpoint::save(&arm_dir, model, &resolved.train.loss)?;
        let batches_path = arm_dir.join("batches.jsonl");
        guard.track(&batches_path);
        let file = fs::File::create(&batches_path)?;
        let mut w = std::io::BufWriter::new(file);
        for (i, ids) in arm.batch_ids.iter().enumerate() {
            let line = serde_json::to_string(&BatchLine { step: i + 1, ids })?;
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }

    print!("{}", outcome.report.render_table());
    for arm in &outcome.report.arms {
        println!(
            "{}: NDCG@10 {:.4} untrained -> {:.4} trained (model {})",
            arm.kind,
            arm.untrained.macro_avg.ndcg10,
            arm.trained.macro_avg.ndcg10,
            arm.model_id,
        );
    }
    println!("artifacts written under {}", args.out.display());
    guard.disarm();
    Ok(())
}
