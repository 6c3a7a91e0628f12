//! `codevec eval`: score a checkpoint against a retrieval dataset at one or
//! more embedding widths, printing the report and writing it under `--out`.

use std::fs;
use std::path::PathBuf;

use anyhow::Result;
use codevec_core::checkpoint;
use codevec_core::dataset::RetrievalDataset;
use codevec_core::evaluator::run_eval;

use crate::output::OutputGuard;

pub struct EvalArgs {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    /// Widths to evaluate; empty means every width the checkpoint serves.
    pub dims: Vec<usize>,
}

pub fn run(args: &EvalArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let ds = RetrievalDataset::load(&args.data)?;
    let dims_list = if args.dims.is_empty() {
        ck.loss.matryoshka_dims.clone()
    } else {
        args.dims.clone()
    };
    let reports = run_eval(&ds, &ck.model, &dims_list)?;

    let mut guard = OutputGuard::new();
    guard.create_dir(&args.out)?;
    let text_path = args.out.join("report.txt");
    let jsonl_path = args.out.join("report.jsonl");
    guard.track(&text_path);
    guard.track(&jsonl_path);

    let mut text = String::new();
    let mut jsonl = String::new();
    for report in &reports {
        println!("{}", report.render_text());
        text.push_str(&report.render_text());
        text.push('\n');
        jsonl.push_str(&report.to_jsonl());
    }
    fs::write(&text_path, text)?;
    fs::write(&jsonl_path, jsonl)?;
    println!("reports written under {}", args.out.display());
    guard.disarm();
    Ok(())
}
