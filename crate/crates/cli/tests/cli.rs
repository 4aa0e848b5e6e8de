mod common;

use std::process::Command;

use common::{digest, ok, run, small_pipeline};

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_2_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for args in [
        vec!["frobnicate"],
        vec!["index", "--corpus", "c.jsonl"],
        vec!["index", "--corpus", "c.jsonl", "--out", "i.bin", "--bogus"],
        vec!["train", "--method", "ppo", "--model", "m", "--queries", "q", "--out", "o.ckpt"],
        vec!["synth", "--mismatch-rate", "1.5", "--out-dir", "data"],
        vec!["eval", "--index", "i", "--queries", "q", "--expander", "aligned", "--topn", "5,1", "--out", "r.json"],
    ] {
        let o = run(d, &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
        assert!(!stderr(&o).is_empty());
    }
    assert_eq!(std::fs::read_dir(d).unwrap().count(), 0);
}

#[test]
fn help_and_version_exit_0() {
    let dir = tempfile::tempdir().unwrap();
    for args in [vec!["--help"], vec!["--version"], vec!["train", "--help"]] {
        let o = run(dir.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
    }
    let help = String::from_utf8(run(dir.path(), &["index", "--help"]).stdout).unwrap();
    assert!(help.contains("repo decision"), "{help}");
}

#[test]
fn missing_input_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["index", "--corpus", "nope.jsonl", "--out", "i.bin"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!dir.path().join("i.bin").exists());
}

#[test]
fn bad_aqe_seed_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(common::aqe())
        .args(["synth", "--n-docs", "20", "--n-train", "4", "--n-test", "2", "--out-dir", "data"])
        .current_dir(dir.path())
        .env("AQE_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

fn synth_with_env(dir: &std::path::Path, env_seed: Option<&str>, flag_seed: &str) -> String {
    let mut c = Command::new(common::aqe());
    c.args(["synth", "--n-docs", "30", "--n-train", "6", "--n-test", "4", "--seed", flag_seed, "--out-dir", "data"])
        .current_dir(dir)
        .env_remove("AQE_SEED");
    if let Some(s) = env_seed {
        c.env("AQE_SEED", s);
    }
    let o = c.output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    digest(&dir.join("data/corpus.jsonl"))
}

#[test]
fn aqe_seed_overrides_the_flag() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let by_flag = synth_with_env(a.path(), None, "9");
    let by_env = synth_with_env(b.path(), Some("9"), "1");
    let other = synth_with_env(c.path(), None, "1");
    assert_eq!(by_flag, by_env);
    assert_ne!(by_flag, other);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d, "3");
    for f in common::ARTIFACTS.iter().chain(&common::MANIFESTS) {
        assert!(d.join(f).is_file(), "{f}");
    }
    assert!(d.join("eval-aligned.json.timing.json").is_file());

    let base: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("aligned.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(base["command"], "train");
    assert_eq!(base["seed"], 3);
    assert!(base["outputs"].get("aligned.rsft.ckpt").is_some(), "{base}");

    ok(
        d,
        &[
            "eval", "--index", "index.bin", "--queries", "data/test.jsonl", "--expander", "zero-shot", "--model",
            "base.ckpt", "--format", "json", "--out", "eval-zs.json",
        ],
    );
    ok(d, &["eval", "--index", "index.bin", "--queries", "data/test.jsonl", "--expander", "identity", "--out", "eval-id.json"]);
    let cmp = ok(
        d,
        &[
            "compare", "--report", "eval-id.json", "--report", "eval-zs.json", "--report", "eval-aligned.json",
            "--baseline", "identity", "--topn", "1,5", "--out", "cmp.json",
        ],
    );
    assert!(!cmp.stdout.is_empty());
    let div = ok(d, &["diversity", "--index", "index.bin", "--input", "eval-aligned.json"]);
    let text = String::from_utf8(div.stdout).unwrap();
    let v: f64 = text.split_whitespace().nth(2).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&v));

    ok(d, &["infer", "--model", "aligned.ckpt", "--question", "what is kefe"]);
    ok(d, &["infer", "--model", "aligned.ckpt", "--queries", "data/test.jsonl", "--out", "infer.jsonl"]);
    let lines = std::fs::read_to_string(d.join("infer.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 8);
    ok(
        d,
        &[
            "infer", "--model", "base.ckpt", "--queries", "data/test.jsonl", "--reranker", "reranker.ckpt", "--n", "4",
            "--out", "infer-filter.jsonl",
        ],
    );

    ok(
        d,
        &[
            "bench", "--index", "index.bin", "--queries", "data/test.jsonl", "--model", "aligned.ckpt", "--base",
            "base.ckpt", "--reranker", "reranker.ckpt", "--n", "5", "--limit", "4", "--out", "bench.json",
        ],
    );
    let b: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("bench.json")).unwrap()).unwrap();
    assert_eq!(b["n_queries"], 4);
}

#[test]
fn train_requires_matching_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["train", "--method", "dpo", "--model", "m.ckpt", "--queries", "q.jsonl", "--out", "o.ckpt"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(
        dir.path(),
        &["train", "--method", "rsft", "--model", "m.ckpt", "--queries", "q.jsonl", "--pairs", "p.jsonl", "--out", "o.ckpt"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn replay_detects_tampered_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--n-docs", "30", "--n-train", "6", "--n-test", "4", "--seed", "2", "--out-dir", "data"]);
    ok(d, &["index", "--corpus", "data/corpus.jsonl", "--out", "index.bin"]);
    ok(d, &["replay", "--manifest", "index.bin.manifest.json"]);
    ok(d, &["replay", "--manifest", "data/manifest.json"]);

    let mpath = d.join("index.bin.manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&mpath).unwrap()).unwrap();
    m["outputs"]["index.bin"] = serde_json::Value::String("0".repeat(64));
    std::fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
    let o = run(d, &["replay", "--manifest", "index.bin.manifest.json"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
