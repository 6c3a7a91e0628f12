//! `codevec embed`: batch-embed a text file (one text per line) to a vector
//! file under `--out`, either binary or line-delimited JSON.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use codevec_core::checkpoint;
use codevec_core::model::EmbedInput;
use codevec_core::prefixes::{Role, TaskType};
use serde::Serialize;

use crate::output::OutputGuard;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum VectorFormat {
    /// 8-byte header (count, dims; little-endian u32 each) then row-major
    /// little-endian f32.
    Binary,
    /// One `{"index": .., "vector": [..]}` object per line.
    Jsonl,
}

pub struct EmbedArgs {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub task: String,
    pub role: String,
    pub dimensions: Option<usize>,
    pub format: VectorFormat,
}

#[derive(Serialize)]
struct JsonlLine<'a> {
    index: usize,
    vector: &'a [f32],
}

pub fn run(args: &EmbedArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let task = TaskType::from_label(&args.task)?;
    let role = Role::from_label(&args.role)?;
    let dims = args.dimensions.unwrap_or_else(|| ck.model.d_model());
    if !ck.loss.matryoshka_dims.contains(&dims) {
        bail!(
            "dimensions {dims} is not a width served by this checkpoint (available: {:?})",
            ck.loss.matryoshka_dims
        );
    }

    let raw = fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let texts: Vec<&str> = raw.lines().collect();
    if texts.is_empty() {
        bail!("no texts in {}", args.input.display());
    }

    let inputs: Vec<EmbedInput<'_>> = texts
        .iter()
        .map(|t| EmbedInput { task, role, text: t })
        .collect();
    let vectors = ck.model.embed(&inputs, dims)?;

    let mut guard = OutputGuard::new();
    guard.create_dir(&args.out)?;
    let path = match args.format {
        VectorFormat::Binary => args.out.join("vectors.bin"),
        VectorFormat::Jsonl => args.out.join("vectors.jsonl"),
    };
    guard.track(&path);
    let file = fs::File::create(&path)?;
    let mut w = std::io::BufWriter::new(file);
    match args.format {
        VectorFormat::Binary => {
            w.write_all(&(vectors.len() as u32).to_le_bytes())?;
            w.write_all(&(dims as u32).to_le_bytes())?;
            for v in &vectors {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        VectorFormat::Jsonl => {
            for (index, v) in vectors.iter().enumerate() {
                let line = serde_json::to_string(&JsonlLine { index, vector: v })?;
                writeln!(w, "{line}")?;
            }
        }
    }
    w.flush()?;

    println!(
        "embedded {} texts at width {dims} (model {}) into {}",
        vectors.len(),
        ck.model_id,
        path.display()
    );
    guard.disarm();
    Ok(())
}
