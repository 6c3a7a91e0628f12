//! End-to-end runs of the `codevec` binary: generate data, train, evaluate,
//! embed, ablate, and the failure paths.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn codevec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codevec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = codevec(args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_err(args: &[&str]) -> String {
    let out = codevec(args);
    assert!(!out.status.success(), "command {:?} unexpectedly passed", args);
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_CONFIG: &str = r#"
[backbone]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_seq_len = 96

[train]
steps = 4
batch_size = 4
seed = 3
"#;

fn line_count(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn gen_train_eval_embed_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();

    let stdout = run_ok(&[
        "gen-data",
        "--pairs",
        "16",
        "--seed",
        "7",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(stdout.contains("16 training pairs"), "{stdout}");
    let pairs_path = data.join("train_pairs.jsonl");
    assert_eq!(line_count(&pairs_path), 16);
    for name in ["corpus.jsonl", "queries.jsonl", "qrels.tsv"] {
        assert!(data.join("heldout").join(name).exists(), "missing {name}");
    }

    let stdout = run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        pairs_path.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(stdout.contains("finished"), "{stdout}");
    for name in [
        "run_config.toml",
        "metrics.jsonl",
        "timing.jsonl",
        "model.json",
        "model.bin",
    ] {
        assert!(run.join(name).exists(), "missing {name}");
    }
    assert_eq!(line_count(&run.join("metrics.jsonl")), 4);

    let eval_out = tmp.path().join("eval");
    let stdout = run_ok(&[
        "eval",
        "--checkpoint",
        run.to_str().unwrap(),
        "--data",
        data.join("heldout").to_str().unwrap(),
        "--dims",
        "16,8",
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("ndcg@10"), "{stdout}");
    assert!(stdout.contains("width=16"), "{stdout}");
    assert!(stdout.contains("width=8"), "{stdout}");
    assert!(eval_out.join("report.txt").exists());
    let jsonl = fs::read_to_string(eval_out.join("report.jsonl")).unwrap();
    assert!(jsonl.lines().any(|l| l.contains("\"record\":\"micro\"")));

    let texts = tmp.path().join("texts.txt");
    fs::write(&texts, "fn a() {}\nfn b() {}\nfn c() {}\n").unwrap();
    let emb = tmp.path().join("emb");
    run_ok(&[
        "embed",
        "--checkpoint",
        run.to_str().unwrap(),
        "--input",
        texts.to_str().unwrap(),
        "--task",
        "nl2code",
        "--role",
        "document",
        "--out",
        emb.to_str().unwrap(),
    ]);
    let bin = fs::read(emb.join("vectors.bin")).unwrap();
    assert_eq!(bin.len(), 8 + 3 * 16 * 4);
    assert_eq!(u32::from_le_bytes(bin[0..4].try_into().unwrap()), 3);
    assert_eq!(u32::from_le_bytes(bin[4..8].try_into().unwrap()), 16);
    // Unit norm per stored row.
    for row in 0..3 {
        let base = 8 + row * 16 * 4;
        let norm: f32 = (0..16)
            .map(|i| {
                let at = base + i * 4;
                f32::from_le_bytes(bin[at..at + 4].try_into().unwrap()).powi(2)
            })
            .sum::<f32>()
            .sqrt();
        assert!((norm - 1.0).abs() < 1e-4, "row {row} norm {norm}");
    }

    let emb_jsonl = tmp.path().join("emb_jsonl");
    run_ok(&[
        "embed",
        "--checkpoint",
        run.to_str().unwrap(),
        "--input",
        texts.to_str().unwrap(),
        "--task",
        "nl2code",
        "--role",
        "document",
        "--dimensions",
        "8",
        "--format",
        "jsonl",
        "--out",
        emb_jsonl.to_str().unwrap(),
    ]);
    let lines = fs::read_to_string(emb_jsonl.join("vectors.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["index"], 0);
    assert_eq!(first["vector"].as_array().unwrap().len(), 8);
}

#[test]
fn ablate_writes_table_checkpoints_and_batch_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG.replace("steps = 4", "steps = 2")).unwrap();
    run_ok(&[
        "gen-data",
        "--pairs",
        "16",
        "--seed",
        "9",
        "--out",
        data.to_str().unwrap(),
    ]);

    let out = tmp.path().join("ablation");
    let stdout = run_ok(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.join("train_pairs.jsonl").to_str().unwrap(),
        "--heldout",
        data.join("heldout").to_str().unwrap(),
        "--kinds",
        "last_token,mean",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stdout.contains("benchmark"), "{stdout}");

    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "benchmark,last_token,mean");
    assert!(out.join("ablation.txt").exists());

    let mut batch_logs = Vec::new();
    for kind in ["last_token", "mean"] {
        let arm = out.join("arms").join(kind);
        assert!(arm.join("model.json").exists(), "{kind} manifest");
        assert!(arm.join("model.bin").exists(), "{kind} blob");
        let log = fs::read_to_string(arm.join("batches.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2, "{kind} batch log");
        batch_logs.push(log);
    }
    assert_eq!(batch_logs[0], batch_logs[1], "arms saw different batches");
}

#[test]
fn missing_data_fails_without_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let stderr = run_err(&[
        "train",
        "--data",
        tmp.path().join("nope.jsonl").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(stderr.contains("error:"), "{stderr}");
    assert!(!out.exists(), "failed run left outputs behind");
}

#[test]
fn unknown_config_key_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nstep = 4\n").unwrap();
    let stderr = run_err(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        "unused.jsonl",
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert!(stderr.contains("step"), "{stderr}");
}

#[test]
fn embed_rejects_unserved_width() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    run_ok(&[
        "gen-data",
        "--pairs",
        "16",
        "--seed",
        "7",
        "--out",
        data.to_str().unwrap(),
    ]);
    run_ok(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.join("train_pairs.jsonl").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);

    let texts = tmp.path().join("texts.txt");
    fs::write(&texts, "x\n").unwrap();
    let stderr = run_err(&[
        "embed",
        "--checkpoint",
        run.to_str().unwrap(),
        "--input",
        texts.to_str().unwrap(),
        "--task",
        "nl2code",
        "--role",
        "query",
        "--dimensions",
        "5",
        "--out",
        tmp.path().join("emb").to_str().unwrap(),
    ]);
    assert!(stderr.contains("width"), "{stderr}");
}

#[test]
fn gen_data_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut contents = Vec::new();
    for (dir, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out = tmp.path().join(dir);
        run_ok(&["gen-data", "--pairs", "16", "--seed", seed, "--out", out.to_str().unwrap()]);
        contents.push(fs::read(out.join("train_pairs.jsonl")).unwrap());
    }
    assert_eq!(contents[0], contents[1], "same seed must reproduce");
    assert_ne!(contents[0], contents[2], "different seed must differ");
}
