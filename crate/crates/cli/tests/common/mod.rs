#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn aqe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_aqe"))
}

/// Runs `aqe args...` in `dir` with AQE_SEED removed from the environment.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(aqe())
        .args(args)
        .current_dir(dir)
        .env_remove("AQE_SEED")
        .env("RAYON_NUM_THREADS", "1")
        .output()
        .expect("spawn aqe")
}

pub fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "aqe {} failed ({:?}):\n{}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Files written by [`small_pipeline`] whose bytes must not depend on the run.
pub const ARTIFACTS: [&str; 14] = [
    "data/corpus.jsonl",
    "data/background.jsonl",
    "data/train.jsonl",
    "data/test.jsonl",
    "index.bin",
    "base.ckpt",
    "cands.jsonl",
    "labeled.jsonl",
    "pairs.jsonl",
    "aligned.ckpt",
    "aligned.rsft.ckpt",
    "reranker.ckpt",
    "eval-aligned.json",
    "eval-filtering.json",
];

/// Manifests written by [`small_pipeline`], in command order.
pub const MANIFESTS: [&str; 10] = [
    "data/manifest.json",
    "index.bin.manifest.json",
    "base.ckpt.manifest.json",
    "cands.jsonl.manifest.json",
    "labeled.jsonl.manifest.json",
    "pairs.jsonl.manifest.json",
    "aligned.ckpt.manifest.json",
    "reranker.ckpt.manifest.json",
    "eval-aligned.json.manifest.json",
    "eval-filtering.json.manifest.json",
];

/// synth, index, pretrain, generate, rank, pairs, train, train-reranker and eval
/// at a size that runs in seconds.
pub fn small_pipeline(dir: &Path, seed: &str) {
    ok(dir, &["synth", "--n-docs", "60", "--n-train", "16", "--n-test", "8", "--seed", seed, "--out-dir", "data"]);
    ok(dir, &["index", "--corpus", "data/corpus.jsonl", "--out", "index.bin"]);
    ok(
        dir,
        &[
            "pretrain", "--corpus", "data/corpus.jsonl", "--corpus", "data/background.jsonl", "--queries",
            "data/train.jsonl", "--dim", "16", "--heads", "2", "--max-len", "32", "--epochs", "1", "--seed", seed,
            "--out", "base.ckpt",
        ],
    );
    ok(
        dir,
        &[
            "generate", "--model", "base.ckpt", "--queries", "data/train.jsonl", "--n", "6", "--seed", seed, "--out",
            "cands.jsonl",
        ],
    );
    ok(
        dir,
        &["rank", "--index", "index.bin", "--queries", "data/train.jsonl", "--candidates", "cands.jsonl", "--out", "labeled.jsonl"],
    );
    ok(dir, &["pairs", "--candidates", "labeled.jsonl", "--out", "pairs.jsonl"]);
    ok(
        dir,
        &[
            "train", "--method", "rsft+dpo", "--model", "base.ckpt", "--queries", "data/train.jsonl", "--labeled",
            "labeled.jsonl", "--pairs", "pairs.jsonl", "--lr", "1e-3", "--epochs", "2", "--seed", seed, "--out",
            "aligned.ckpt",
        ],
    );
    ok(
        dir,
        &[
            "train-reranker", "--index", "index.bin", "--model", "base.ckpt", "--queries", "data/train.jsonl",
            "--labeled", "labeled.jsonl", "--epochs", "2", "--seed", seed, "--out", "reranker.ckpt",
        ],
    );
    ok(
        dir,
        &[
            "eval", "--index", "index.bin", "--queries", "data/test.jsonl", "--expander", "aligned", "--model",
            "aligned.ckpt", "--name", "rsft+dpo", "--format", "json", "--out", "eval-aligned.json",
        ],
    );
    ok(
        dir,
        &[
            "eval", "--index", "index.bin", "--queries", "data/test.jsonl", "--expander", "filtering", "--model",
            "base.ckpt", "--reranker", "reranker.ckpt", "--n", "6", "--seed", seed, "--format", "json", "--out",
            "eval-filtering.json",
        ],
    );
}

pub fn digest(path: &Path) -> String {
    aqe_core::persist::file_digest(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
