//! One function per subcommand. Each resolves its configuration, does the work
//! through `aqe_core`, writes outputs atomically and records a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use aqe_core::alignment::{run_pipeline, Method, TrainConfig};
use aqe_core::data::{self, gen_synthetic, Document, QueryExample};
use aqe_core::eval::{bench_latency, compare_runs, diversity, evaluate, EvalReport, Expander};
use aqe_core::expansion::{build_pairs, build_rsft_set, generate_all, rank_all, ExpansionCandidate, ExpansionModel, PreferencePair};
use aqe_core::filtering::{train_reranker, RerankerParams, RerankerTrainConfig};
use aqe_core::persist::{file_digest, write_atomic};
use aqe_core::pipeline::{model_vocab, pretrain, rerank_items, reranker_space, tokenize_pairs, tokenize_rsft, PretrainConfig};
use aqe_core::report::{render_comparisons, render_table, to_sorted_json};
use aqe_core::retrieval::InvertedIndex;
use aqe_core::seed::{derive_seed, seed_from_env};
use aqe_core::seqmodel::ModelConfig;

use crate::manifest::{self, RunManifest};
use crate::{usage, CmdResult, Command, ExpanderKind, Failure, Format, SeedArg};

/// Invocation context: the raw arguments (for the manifest) and a seed forced by replay.
#[derive(Debug, Clone, Default)]
pub struct Ctx {
    pub argv: Vec<String>,
    pub seed_override: Option<u64>,
}

impl Ctx {
    fn seed(&self, arg: &SeedArg) -> CmdResult<u64> {
        match self.seed_override {
            Some(s) => Ok(s),
            None => seed_from_env(arg.seed).map_err(Failure::Usage),
        }
    }
}

/// Bookkeeping for one command run.
struct Recorder<'a> {
    ctx: &'a Ctx,
    command: &'static str,
    start: Instant,
    started_at: String,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl<'a> Recorder<'a> {
    fn new(ctx: &'a Ctx, command: &'static str) -> Self {
        Self {
            ctx,
            command,
            start: Instant::now(),
            started_at: manifest::now_rfc3339(),
            seed: None,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    fn finish(self, manifest_path: &Path) -> CmdResult {
        let m = RunManifest {
            tool: manifest::TOOL.into(),
            version: manifest::VERSION.into(),
            command: self.command.into(),
            argv: self.ctx.argv.clone(),
            seed: self.seed,
            config: self.config,
            inputs: manifest::digests(&self.inputs)?,
            outputs: manifest::digests(&self.outputs)?,
            started_at: self.started_at,
            finished_at: manifest::now_rfc3339(),
            elapsed_seconds: self.start.elapsed().as_secs_f64(),
        };
        m.write(manifest_path)?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    write_atomic(path, to_sorted_json(value)?.as_bytes())?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CmdResult<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn load_model(path: &Path) -> CmdResult<ExpansionModel> {
    Ok(ExpansionModel::load(path, None)?.0)
}

fn load_reranker(path: &Path) -> CmdResult<RerankerParams> {
    Ok(RerankerParams::load(path, None)?.0)
}

fn check_topn(ns: &[usize]) -> CmdResult {
    if ns.is_empty() || ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
        return usage(format!("--topn must be strictly ascending positive integers, got {ns:?}"));
    }
    Ok(())
}

pub fn dispatch(cmd: &Command, ctx: &Ctx) -> CmdResult {
    match cmd {
        Command::Synth(a) => synth(a, ctx),
        Command::Index(a) => index(a, ctx),
        Command::Pretrain(a) => pretrain_cmd(a, ctx),
        Command::Generate(a) => generate(a, ctx),
        Command::Rank(a) => rank(a, ctx),
        Command::Pairs(a) => pairs(a, ctx),
        Command::Train(a) => train(a, ctx),
        Command::TrainReranker(a) => train_reranker_cmd(a, ctx),
        Command::Infer(a) => infer(a, ctx),
        Command::Eval(a) => eval(a, ctx),
        Command::Compare(a) => compare(a, ctx),
        Command::Diversity(a) => diversity_cmd(a, ctx),
        Command::Bench(a) => bench(a, ctx),
        Command::Replay(a) => replay(a),
    }
}

#[derive(Serialize)]
struct SynonymRecord<'a> {
    canonical: &'a str,
    synonym: &'a str,
}

fn synth(a: &crate::SynthArgs, ctx: &Ctx) -> CmdResult {
    if !(0.0..=1.0).contains(&a.mismatch_rate) {
        return usage(format!("--mismatch-rate must lie in [0, 1], got {}", a.mismatch_rate));
    }
    if a.n_train + a.n_test == 0 || a.n_docs < a.n_train + a.n_test {
        return usage("need --n-docs >= --n-train + --n-test >= 1");
    }
    let seed = ctx.seed(&a.seed)?;
    let mut rec = Recorder::new(ctx, "synth");
    rec.seed = Some(seed);
    rec.config = json!({
        "n_docs": a.n_docs, "n_train": a.n_train, "n_test": a.n_test,
        "mismatch_rate": a.mismatch_rate, "seed": seed,
    });
    let ds = gen_synthetic(a.n_docs, a.n_train + a.n_test, a.mismatch_rate, seed)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let (train, test) = ds.queries.split_at(a.n_train);
    let path = |name: &str| a.out_dir.join(name);
    data::save_corpus(&path("corpus.jsonl"), &ds.docs)?;
    data::save_corpus(&path("background.jsonl"), &ds.background)?;
    data::save_queries(&path("train.jsonl"), train)?;
    data::save_queries(&path("test.jsonl"), test)?;
    let syn: Vec<SynonymRecord> = ds
        .synonyms
        .iter()
        .map(|(c, s)| SynonymRecord { canonical: c, synonym: s })
        .collect();
    data::write_jsonl(&path("synonyms.jsonl"), &syn)?;
    for name in ["corpus.jsonl", "background.jsonl", "train.jsonl", "test.jsonl", "synonyms.jsonl"] {
        rec.output(&path(name));
    }
    println!(
        "wrote {} documents, {} background documents, {} train and {} test queries to {}",
        ds.docs.len(),
        ds.background.len(),
        train.len(),
        test.len(),
        a.out_dir.display()
    );
    rec.finish(&a.out_dir.join("manifest.json"))
}

fn index(a: &crate::IndexArgs, ctx: &Ctx) -> CmdResult {
    let mut rec = Recorder::new(ctx, "index");
    rec.config = json!({"k1": a.k1, "b": a.b});
    rec.input(&a.corpus);
    let docs = data::load_corpus(&a.corpus)?;
    let idx = InvertedIndex::build(&docs, a.k1, a.b)?;
    let digest = idx.save(&a.out)?;
    rec.output(&a.out);
    println!("indexed {} documents, sha256 {digest}", idx.num_docs());
    rec.finish(&manifest::manifest_path(&a.out))
}

fn pretrain_cmd(a: &crate::PretrainArgs, ctx: &Ctx) -> CmdResult {
    let seed = ctx.seed(&a.seed)?;
    let mut rec = Recorder::new(ctx, "pretrain");
    rec.seed = Some(seed);
    let mut docs: Vec<Document> = Vec::new();
    for p in &a.corpus {
        rec.input(p);
        docs.extend(data::load_corpus(p)?);
    }
    let queries = match &a.queries {
        Some(p) => {
            rec.input(p);
            data::load_queries(p, None)?
        }
        None => Vec::new(),
    };
    let vocab = model_vocab(&docs, &queries)?;
    let mc = ModelConfig {
        vocab_size: vocab.len(),
        n_layers: a.layers,
        dim: a.dim,
        n_heads: a.heads,
        max_len: a.max_len,
        seed: derive_seed(seed, "init", 0),
        init_std: a.init_std,
    };
    let pc = PretrainConfig {
        per_doc: a.per_doc,
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed,
    };
    rec.config = json!({"model": mc, "pretrain": pc});
    let (model, trace) = pretrain(&mc, vocab, &docs, &pc)?;
    let provenance = json!({
        "stage": "pretrain",
        "seed": seed,
        "pretrain": pc,
        "inputs": manifest::digests(&rec.inputs)?,
        "final_loss": trace.last(),
    });
    let digest = model.save(&a.out, provenance)?;
    rec.output(&a.out);
    println!(
        "pretrained {} parameters over {} vocabulary words, final loss {:.4}, sha256 {digest}",
        model.params.num_params(),
        model.vocab.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    rec.finish(&manifest::manifest_path(&a.out))
}

fn generate(a: &crate::GenerateArgs, ctx: &Ctx) -> CmdResult {
    let seed = ctx.seed(&a.seed)?;
    let cfg = a.gen.config();
    if cfg.n == 0 {
        return usage("--n must be at least 1");
    }
    let mut rec = Recorder::new(ctx, "generate");
    rec.seed = Some(seed);
    rec.config = json!({"generation": cfg, "seed": seed});
    rec.input(&a.model);
    rec.input(&a.queries);
    let model = load_model(&a.model)?;
    let queries = data::load_queries(&a.queries, None)?;
    let cands = generate_all(&model, &queries, &cfg, derive_seed(seed, "generate", 0))?;
    data::write_jsonl(&a.out, &cands)?;
    rec.output(&a.out);
    println!("wrote {} candidates for {} queries", cands.len(), queries.len());
    rec.finish(&manifest::manifest_path(&a.out))
}

fn rank(a: &crate::RankArgs, ctx: &Ctx) -> CmdResult {
    let mut rec = Recorder::new(ctx, "rank");
    rec.config = json!({"cutoff": a.cutoff.cutoff});
    for p in [&a.index, &a.queries, &a.candidates] {
        rec.input(p);
    }
    let idx = InvertedIndex::load(&a.index)?;
    let queries = data::load_queries(&a.queries, Some(&idx.doc_ids().iter().cloned().collect()))?;
    let cands: Vec<ExpansionCandidate> = data::read_jsonl_file(&a.candidates)?;
    let labeled = rank_all(&idx, &queries, &cands, a.cutoff.cutoff)?;
    data::write_jsonl(&a.out, &labeled)?;
    rec.output(&a.out);
    println!("labeled {} candidates", labeled.len());
    rec.finish(&manifest::manifest_path(&a.out))
}

fn pairs(a: &crate::PairsArgs, ctx: &Ctx) -> CmdResult {
    let mut rec = Recorder::new(ctx, "pairs");
    rec.config = json!({});
    rec.input(&a.candidates);
    let labeled: Vec<ExpansionCandidate> = data::read_jsonl_file(&a.candidates)?;
    let pairs = build_pairs(&labeled)?;
    data::write_jsonl(&a.out, &pairs)?;
    rec.output(&a.out);
    println!("wrote {} preference pairs", pairs.len());
    rec.finish(&manifest::manifest_path(&a.out))
}

/// `dir/name.ckpt` -> `dir/name.rsft.ckpt`
fn default_rsft_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.rsft.{}", ext.to_string_lossy()),
        None => format!("{stem}.rsft"),
    };
    out.with_file_name(name)
}

fn train(a: &crate::TrainArgs, ctx: &Ctx) -> CmdResult {
    if a.method.uses_rsft() && a.labeled.is_none() {
        return usage(format!("--method {} needs --labeled", a.method));
    }
    if a.method.uses_dpo() && a.pairs.is_none() {
        return usage(format!("--method {} needs --pairs", a.method));
    }
    if a.rsft_out.is_some() && a.method != Method::RsftDpo {
        return usage("--rsft-out only applies to --method rsft+dpo");
    }
    let seed = ctx.seed(&a.seed)?;
    let tc = TrainConfig {
        method: a.method,
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        beta: a.beta,
        seed: derive_seed(seed, "align", 0),
        dpo_lr: a.dpo_lr,
        dpo_epochs: a.dpo_epochs,
    };
    if let Err(e) = tc.validate() {
        return usage(e.to_string());
    }
    let mut rec = Recorder::new(ctx, "train");
    rec.seed = Some(seed);
    rec.config = json!({"train": tc, "seed": seed});
    rec.input(&a.model);
    rec.input(&a.queries);
    let base = load_model(&a.model)?;
    let queries = data::load_queries(&a.queries, None)?;
    let rsft_seq = match &a.labeled {
        Some(p) if a.method.uses_rsft() => {
            rec.input(p);
            let labeled: Vec<ExpansionCandidate> = data::read_jsonl_file(p)?;
            tokenize_rsft(&base, &build_rsft_set(&queries, &labeled)?)?
        }
        _ => Vec::new(),
    };
    let pair_seq = match &a.pairs {
        Some(p) if a.method.uses_dpo() => {
            rec.input(p);
            let pairs: Vec<PreferencePair> = data::read_jsonl_file(p)?;
            Some(tokenize_pairs(&base, &queries, &pairs)?)
        }
        _ => None,
    };
    let run = run_pipeline(&base.params, &rsft_seq, pair_seq.as_deref(), &tc)?;
    let inputs = manifest::digests(&rec.inputs)?;
    let provenance = |stage: &str, reference: Option<&String>| {
        json!({
            "stage": stage,
            "method": a.method,
            "seed": seed,
            "train": tc,
            "base_digest": base.params.digest(),
            "reference_digest": reference,
            "inputs": inputs,
            "rsft_examples": rsft_seq.len(),
            "pairs": pair_seq.as_ref().map(Vec::len),
            "rsft_final_loss": run.rsft_trace.last(),
            "dpo_final_loss": run.dpo_trace.last(),
        })
    };
    if let Some(rsft_params) = &run.rsft_params {
        let path = a.rsft_out.clone().unwrap_or_else(|| default_rsft_path(&a.out));
        let m = ExpansionModel::new(rsft_params.clone(), base.vocab.clone())?;
        let d = m.save(&path, provenance("rsft", None))?;
        rec.output(&path);
        println!("rsft checkpoint {} sha256 {d}", path.display());
    }
    let model = ExpansionModel::new(run.params.clone(), base.vocab.clone())?;
    let d = model.save(&a.out, provenance(a.method.as_str(), run.reference.as_ref()))?;
    rec.output(&a.out);
    println!(
        "{} checkpoint {} sha256 {d} ({} rsft examples, {} pairs)",
        a.method,
        a.out.display(),
        rsft_seq.len(),
        pair_seq.as_ref().map_or(0, Vec::len)
    );
    rec.finish(&manifest::manifest_path(&a.out))
}

fn train_reranker_cmd(a: &crate::TrainRerankerArgs, ctx: &Ctx) -> CmdResult {
    let seed = ctx.seed(&a.seed)?;
    let cfg = RerankerTrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed,
    };
    if !(a.alpha >= 0.0) || !(a.lr > 0.0) || a.batch_size == 0 {
        return usage("need --alpha >= 0, --lr > 0 and --batch-size >= 1");
    }
    let mut rec = Recorder::new(ctx, "train-reranker");
    rec.seed = Some(seed);
    rec.config = json!({"alpha": a.alpha, "train": cfg});
    for p in [&a.index, &a.model, &a.queries, &a.labeled] {
        rec.input(p);
    }
    let idx = InvertedIndex::load(&a.index)?;
    let model = load_model(&a.model)?;
    let queries = data::load_queries(&a.queries, None)?;
    let labeled: Vec<ExpansionCandidate> = data::read_jsonl_file(&a.labeled)?;
    let rp = RerankerParams::new(reranker_space(&idx, &model.vocab)?, a.alpha)?;
    let (rp, trace) = train_reranker(&rp, &rerank_items(&queries, &labeled)?, &cfg)?;
    let provenance = json!({
        "stage": "reranker",
        "seed": seed,
        "alpha": a.alpha,
        "train": cfg,
        "inputs": manifest::digests(&rec.inputs)?,
        "final_loss": trace.last(),
    });
    let d = rp.save(&a.out, provenance)?;
    rec.output(&a.out);
    println!("reranker over {} features, sha256 {d}", rp.space.dim());
    rec.finish(&manifest::manifest_path(&a.out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub query_id: String,
    pub question: String,
    pub expansion: String,
    pub forward_passes: usize,
}

fn infer(a: &crate::InferArgs, ctx: &Ctx) -> CmdResult {
    if a.question.is_none() && a.queries.is_none() {
        return usage("give --question or --queries");
    }
    if a.question.is_some() && a.out.is_some() {
        return usage("--out only applies with --queries");
    }
    let seed = ctx.seed(&a.seed)?;
    let gen = a.gen.config();
    let mut rec = Recorder::new(ctx, "infer");
    rec.input(&a.model);
    let model = load_model(&a.model)?;
    let reranker = match &a.reranker {
        Some(p) => {
            rec.input(p);
            rec.seed = Some(seed);
            Some(load_reranker(p)?)
        }
        None => None,
    };
    rec.config = json!({"mode": if reranker.is_some() { "filtering" } else { "greedy" }, "generation": gen, "seed": seed});
    let expander = match &reranker {
        Some(rp) => Expander::Filtering {
            model: &model,
            reranker: rp,
            generation: gen,
            seed: derive_seed(seed, "filter", 0),
        },
        None => Expander::Aligned(&model),
    };
    if let Some(q) = &a.question {
        let (text, _) = expander.expand("q", q)?;
        println!("{text}");
        return Ok(());
    }
    let (Some(qpath), Some(out)) = (&a.queries, &a.out) else {
        return usage("--queries needs --out");
    };
    rec.input(qpath);
    let queries = data::load_queries(qpath, None)?;
    let records = queries
        .iter()
        .map(|q| {
            let (expansion, forward_passes) = expander.expand(&q.id, &q.question)?;
            Ok(InferRecord {
                query_id: q.id.clone(),
                question: q.question.clone(),
                expansion,
                forward_passes,
            })
        })
        .collect::<aqe_core::Result<Vec<_>>>()?;
    data::write_jsonl(out, &records)?;
    rec.output(out);
    println!("expanded {} queries", records.len());
    rec.finish(&manifest::manifest_path(out))
}

fn eval(a: &crate::EvalArgs, ctx: &Ctx) -> CmdResult {
    check_topn(&a.topn)?;
    let needs_model = a.expander != ExpanderKind::Identity;
    if needs_model && a.model.is_none() {
        return usage("this expander needs --model");
    }
    if a.expander == ExpanderKind::Filtering && a.reranker.is_none() {
        return usage("--expander filtering needs --reranker");
    }
    let seed = ctx.seed(&a.seed)?;
    let gen = a.gen.config();
    let mut rec = Recorder::new(ctx, "eval");
    rec.input(&a.index);
    rec.input(&a.queries);
    let idx = InvertedIndex::load(&a.index)?;
    let queries = data::load_queries(&a.queries, Some(&idx.doc_ids().iter().cloned().collect()))?;
    let model = match (&a.model, needs_model) {
        (Some(p), true) => {
            rec.input(p);
            Some(load_model(p)?)
        }
        _ => None,
    };
    let reranker = match (&a.reranker, a.expander) {
        (Some(p), ExpanderKind::Filtering) => {
            rec.input(p);
            Some(load_reranker(p)?)
        }
        _ => None,
    };
    let expander = match a.expander {
        ExpanderKind::Identity => Expander::Identity,
        ExpanderKind::ZeroShot => Expander::ZeroShot(model.as_ref().expect("checked")),
        ExpanderKind::Aligned => Expander::Aligned(model.as_ref().expect("checked")),
        ExpanderKind::Filtering => {
            rec.seed = Some(seed);
            Expander::Filtering {
                model: model.as_ref().expect("checked"),
                reranker: reranker.as_ref().expect("checked"),
                generation: gen,
                seed: derive_seed(seed, "filter", 0),
            }
        }
    };
    let name = a.name.clone().unwrap_or_else(|| expander.name().to_string());
    rec.config = json!({
        "expander": expander.name(), "name": name, "topn": a.topn, "cutoff": a.cutoff.cutoff,
        "generation": gen, "seed": seed,
    });
    let (mut report, timing) = evaluate(&idx, &queries, &expander, &a.topn, a.cutoff.cutoff)?;
    report.expander = name.clone();
    write_json(&a.out, &report)?;
    let timing_path = manifest::sidecar(&a.out, "timing.json");
    write_json(&timing_path, &timing)?;
    rec.output(&a.out);
    match a.format {
        Format::Table => print!("{}", render_table(&[(name, report.accuracy.clone())], &a.topn)),
        Format::Json => print!("{}", to_sorted_json(&report)?),
    }
    rec.finish(&manifest::manifest_path(&a.out))
}

fn compare(a: &crate::CompareArgs, ctx: &Ctx) -> CmdResult {
    if a.reports.len() < 2 {
        return usage("compare needs at least two --report files");
    }
    let mut rec = Recorder::new(ctx, "compare");
    let mut runs: Vec<(String, EvalReport)> = Vec::new();
    for p in &a.reports {
        rec.input(p);
        let r: EvalReport = read_json(p)?;
        if runs.iter().any(|(n, _)| *n == r.expander) {
            return usage(format!("two reports are named {:?}; relabel one with eval --name", r.expander));
        }
        runs.push((r.expander.clone(), r));
    }
    let baseline = match &a.baseline {
        None => 0,
        Some(b) => match runs.iter().position(|(n, _)| n == b) {
            Some(i) => i,
            None => return usage(format!("no report named {b:?}")),
        },
    };
    let ns: Vec<usize> = if a.topn.is_empty() {
        runs[0].1.accuracy.keys().copied().collect()
    } else {
        a.topn.clone()
    };
    check_topn(&ns)?;
    for (name, r) in &runs {
        if let Some(n) = ns.iter().find(|&&n| n > r.cutoff) {
            return Err(Failure::Runtime(anyhow!("report {name} has cutoff {} below N = {n}", r.cutoff)));
        }
    }
    rec.config = json!({"baseline": runs[baseline].0, "topn": ns});
    let results = compare_runs(&runs, baseline, &ns)?;
    let rows: Vec<(String, BTreeMap<usize, f64>)> = runs.iter().map(|(n, r)| (n.clone(), r.accuracy.clone())).collect();
    match a.format {
        Format::Table => print!("{}\n{}", render_table(&rows, &ns), render_comparisons(&results)),
        Format::Json => print!("{}", to_sorted_json(&results)?),
    }
    match &a.out {
        Some(out) => {
            write_json(out, &results)?;
            rec.output(out);
            rec.finish(&manifest::manifest_path(out))
        }
        None => Ok(()),
    }
}

/// Expansion texts from a report (`.json`) or from `aqe infer` output.
fn read_expansions(path: &Path) -> CmdResult<Vec<String>> {
    if path.extension().is_some_and(|e| e == "json") {
        let r: EvalReport = read_json(path)?;
        return Ok(r.per_query.into_iter().map(|q| q.expansion).collect());
    }
    let rows: Vec<InferRecord> = data::read_jsonl_file(path)?;
    Ok(rows.into_iter().map(|r| r.expansion).collect())
}

fn diversity_cmd(a: &crate::DiversityArgs, ctx: &Ctx) -> CmdResult {
    let mut rec = Recorder::new(ctx, "diversity");
    rec.config = json!({});
    rec.input(&a.index);
    rec.input(&a.input);
    let idx = InvertedIndex::load(&a.index)?;
    let texts = read_expansions(&a.input)?;
    let d = diversity(&texts, &idx)?;
    println!("D = {d:.6} over {} expansions", texts.len());
    match &a.out {
        Some(out) => {
            write_json(out, &json!({"diversity": d, "expansions": texts.len()}))?;
            rec.output(out);
            rec.finish(&manifest::manifest_path(out))
        }
        None => Ok(()),
    }
}

fn bench(a: &crate::BenchArgs, ctx: &Ctx) -> CmdResult {
    if a.repetitions < 3 {
        return usage("--repetitions must be at least 3");
    }
    let seed = ctx.seed(&a.seed)?;
    let gen = a.gen.config();
    let mut rec = Recorder::new(ctx, "bench");
    rec.seed = Some(seed);
    rec.config = json!({"generation": gen, "repetitions": a.repetitions, "limit": a.limit, "cutoff": a.cutoff.cutoff, "seed": seed});
    for p in [&a.index, &a.queries, &a.model, &a.base, &a.reranker] {
        rec.input(p);
    }
    let idx = InvertedIndex::load(&a.index)?;
    let mut queries: Vec<QueryExample> = data::load_queries(&a.queries, None)?;
    if let Some(l) = a.limit {
        queries.truncate(l);
    }
    let aligned = load_model(&a.model)?;
    let base = load_model(&a.base)?;
    let rp = load_reranker(&a.reranker)?;
    let r = bench_latency(
        &idx,
        &queries,
        &aligned,
        (&base, &rp),
        &gen,
        derive_seed(seed, "filter", 0),
        a.cutoff.cutoff,
        a.repetitions,
    )?;
    write_json(&a.out, &r)?;
    rec.output(&a.out);
    let per = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    println!(
        "forward passes per query: aligned {:.2}, filtering {:.2} (ratio {:.4})",
        per(&r.aligned_passes),
        per(&r.filtering_passes),
        r.pass_ratio
    );
    println!(
        "median seconds per query: aligned {:.6}, filtering {:.6} (ratio {:.4})",
        r.aligned_median_seconds, r.filtering_median_seconds, r.time_ratio
    );
    rec.finish(&manifest::manifest_path(&a.out))
}

fn replay(a: &crate::ReplayArgs) -> CmdResult {
    use clap::Parser;
    let m = RunManifest::read(&a.manifest)?;
    let argv = std::iter::once("aqe".to_string()).chain(m.argv.iter().cloned());
    let cli = crate::Cli::try_parse_from(argv).map_err(|e| anyhow!("manifest arguments no longer parse: {e}"))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Failure::Runtime(anyhow!("refusing to replay a replay")));
    }
    let ctx = Ctx {
        argv: m.argv.clone(),
        seed_override: m.seed,
    };
    dispatch(&cli.command, &ctx)?;
    let mut mismatches = 0;
    for (path, expected) in &m.outputs {
        let found = file_digest(Path::new(path))?;
        if &found == expected {
            println!("ok        {path}");
        } else {
            println!("MISMATCH  {path}: expected {expected}, found {found}");
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        return Err(Failure::Runtime(anyhow!("{mismatches} output(s) differ from the manifest")));
    }
    println!("replayed {} with {} identical output(s)", m.command, m.outputs.len());
    Ok(())
}
