//! `codevec gen-data`: generate the synthetic marker-retrieval corpus:
//! training pairs plus a held-out retrieval split with disjoint markers.

use std::path::PathBuf;

use anyhow::Result;
use codevec_core::dataset::{generate_planted, save_pairs};

use crate::config::RunConfig;
use crate::output::OutputGuard;

pub struct GenDataArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub pairs: usize,
}

pub fn run(args: &GenDataArgs) -> Result<()> {
    let resolved = RunConfig::load(args.config.as_deref())?.resolve(args.seed)?;
    let seed = resolved.train.seed;
    let corpus = generate_planted(args.pairs, seed)?;

    let mut guard = OutputGuard::new();
    guard.create_dir(&args.out)?;
    let pairs_path = args.out.join("train_pairs.jsonl");
    guard.track(&pairs_path);
    save_pairs(&pairs_path, &corpus.train_pairs)?;
    let heldout_dir = args.out.join("heldout");
    guard.create_dir(&heldout_dir)?;
    corpus.heldout.save(&heldout_dir)?;

    println!(
        "seed {seed}: {} training pairs in {}, {} held-out queries over {} documents in {}",
        corpus.train_pairs.len(),
        pairs_path.display(),
        corpus.heldout.queries.len(),
        corpus.heldout.corpus.len(),
        heldout_dir.display(),
    );
    guard.disarm();
    Ok(())
}
