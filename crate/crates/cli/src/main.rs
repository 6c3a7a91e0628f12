use std::path::PathBuf;

use clap::{Parser, Subcommand};
use codevec_cli::commands::embed::VectorFormat;
use codevec_cli::commands::{ablate, embed, eval, gen_data, serve, train};

#[derive(Parser)]
#[command(
    name = "codevec",
    version,
    about = "Train, evaluate, and serve desk-scale code embedding models"
)]
struct Cli {
    /// Run configuration file (TOML); library defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides every random seed in the run configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory outputs are written under.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an embedding model on contrastive pairs.
    Train {
        /// Training pairs (JSON lines with id, task, query, document).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Embed a file of texts, one per line, into a vector file.
    Embed {
        /// Checkpoint directory (model.json + model.bin).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input text file, one text per line.
        #[arg(long)]
        input: PathBuf,
        /// Task label (nl2code, techqa, code2code, code2nl, code2completion).
        #[arg(long)]
        task: String,
        /// Role label (query or document).
        #[arg(long)]
        role: String,
        /// Output width; defaults to the checkpoint's full width.
        #[arg(long)]
        dimensions: Option<usize>,
        /// Vector file format.
        #[arg(long, value_enum, default_value_t = VectorFormat::Binary)]
        format: VectorFormat,
    },
    /// Score a checkpoint against a retrieval dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (corpus.jsonl, queries.jsonl, qrels.tsv).
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated widths; defaults to every width the checkpoint
        /// serves.
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
    },
    /// Train one model per pooling kind under one recipe and compare them.
    Ablate {
        /// Training pairs (JSON lines with id, task, query, document).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Held-out dataset directory for scoring the arms.
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Comma-separated pooling kinds; defaults to all three.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Address to bind.
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Generate a synthetic marker-retrieval corpus.
    GenData {
        /// Number of training pairs (the held-out split is half this).
        #[arg(long, default_value_t = 512)]
        pairs: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { data } => train::run(&train::TrainArgs {
            config: cli.config,
            seed: cli.seed,
            out: cli.out,
            data,
        }),
        Command::Embed {
            checkpoint,
            input,
            task,
            role,
            dimensions,
            format,
        } => embed::run(&embed::EmbedArgs {
            out: cli.out,
            checkpoint,
            input,
            task,
            role,
            dimensions,
            format,
        }),
        Command::Eval {
            checkpoint,
            data,
            dims,
        } => eval::run(&eval::EvalArgs {
            out: cli.out,
            checkpoint,
            data,
            dims,
        }),
        Command::Ablate {
            data,
            heldout,
            kinds,
        } => ablate::run(&ablate::AblateArgs {
            config: cli.config,
            seed: cli.seed,
            out: cli.out,
            data,
            heldout,
            kinds,
        }),
        Command::Serve { checkpoint, bind } => serve::run(&serve::ServeArgs { checkpoint, bind }),
        Command::GenData { pairs } => gen_data::run(&gen_data::GenDataArgs {
            config: cli.config,
            seed: cli.seed,
            out: cli.out,
            pairs,
        }),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
