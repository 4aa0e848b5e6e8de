//! `aqe`: command-line driver for the expansion pipeline.
//!
//! Every command that writes files also writes `<output>.manifest.json`, which
//! `aqe replay` can re-execute and check digest for digest.

pub mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aqe_core::alignment::Method;

/// Failure classes, mapped to exit codes 2 and 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<aqe_core::Error> for Failure {
    fn from(e: aqe_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

pub fn usage<T>(msg: impl Into<String>) -> CmdResult<T> {
    Err(Failure::Usage(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "aqe", version, about = "Aligned query expansion for BM25 retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with a controllable vocabulary gap.
    Synth(SynthArgs),
    /// Build a BM25 index from a corpus JSONL file.
    Index(IndexArgs),
    /// Train a fresh base model on document text.
    Pretrain(PretrainArgs),
    /// Sample n expansion candidates per query.
    Generate(GenerateArgs),
    /// Label candidates with the gold-document rank of their expanded query.
    Rank(RankArgs),
    /// Build (best, worst) preference pairs from labeled candidates.
    Pairs(PairsArgs),
    /// Align a base model with RSFT, DPO or RSFT followed by DPO.
    Train(TrainArgs),
    /// Train the bilinear reranker of the generate-then-filter baseline.
    TrainReranker(TrainRerankerArgs),
    /// Expand queries with a checkpoint.
    Infer(InferArgs),
    /// Top-N retrieval accuracy of one expander on a query set.
    Eval(EvalArgs),
    /// Paired t-tests between evaluation reports.
    Compare(CompareArgs),
    /// Diversity score of a set of expansions.
    Diversity(DiversityArgs),
    /// Forward passes and latency: aligned single-shot vs generate-then-filter.
    Bench(BenchArgs),
    /// Re-run the command recorded in a manifest and check its output digests.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SeedArg {
    /// Global seed; the AQE_SEED environment variable overrides it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CutoffArg {
    /// Retrieval depth; gold documents below it get rank cutoff+1 (repo decision).
    #[arg(long, default_value_t = aqe_core::retrieval::DEFAULT_CUTOFF)]
    pub cutoff: usize,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    /// Samples per query.
    #[arg(long, default_value_t = aqe_core::expansion::DEFAULT_N)]
    pub n: usize,
    /// Sampling temperature.
    #[arg(long, default_value_t = aqe_core::expansion::DEFAULT_TEMPERATURE)]
    pub temperature: f64,
    /// Top-k truncation before sampling.
    #[arg(long, default_value_t = aqe_core::expansion::DEFAULT_TOP_K)]
    pub top_k: usize,
    /// Token budget per expansion (repo decision).
    #[arg(long, default_value_t = aqe_core::expansion::MAX_NEW_TOKENS)]
    pub max_new: usize,
}

impl GenArgs {
    pub fn config(&self) -> aqe_core::expansion::GenerationConfig {
        aqe_core::expansion::GenerationConfig {
            n: self.n,
            temperature: self.temperature,
            top_k: self.top_k,
            max_new: self.max_new,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    pub n_docs: usize,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_test: usize,
    /// Probability that a query is phrased with synonyms absent from the corpus.
    #[arg(long, default_value_t = 0.7)]
    pub mismatch_rate: f64,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Directory for corpus.jsonl, background.jsonl, train.jsonl, test.jsonl, synonyms.jsonl.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// BM25 term-frequency saturation (repo decision).
    #[arg(long, default_value_t = aqe_core::retrieval::DEFAULT_K1)]
    pub k1: f64,
    /// BM25 length normalization (repo decision).
    #[arg(long, default_value_t = aqe_core::retrieval::DEFAULT_B)]
    pub b: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    /// Document JSONL files to learn from; repeatable.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// Training queries whose words join the vocabulary.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Transformer width (repo decision).
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Transformer blocks (repo decision).
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Attention heads (repo decision).
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Maximum sequence length (repo decision).
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Initial weight standard deviation (repo decision).
    #[arg(long, default_value_t = 0.02)]
    pub init_std: f64,
    /// Training examples cut from each document.
    #[arg(long, default_value_t = aqe_core::pipeline::PretrainConfig::default().per_doc)]
    pub per_doc: usize,
    #[arg(long, default_value_t = aqe_core::pipeline::PretrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = aqe_core::pipeline::PretrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = aqe_core::pipeline::PretrainConfig::default().epochs)]
    pub epochs: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    #[command(flatten)]
    pub cutoff: CutoffArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PairsArgs {
    /// Labeled candidates from `aqe rank`.
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// Base model checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Training queries (prompts).
    #[arg(long)]
    pub queries: PathBuf,
    /// Labeled candidates; required by rsft and rsft+dpo.
    #[arg(long)]
    pub labeled: Option<PathBuf>,
    /// Preference pairs; required by dpo and rsft+dpo.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Learning rate.
    #[arg(long, default_value_t = aqe_core::alignment::DEFAULT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = aqe_core::alignment::DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, default_value_t = aqe_core::alignment::DEFAULT_EPOCHS)]
    pub epochs: usize,
    /// DPO temperature.
    #[arg(long, default_value_t = aqe_core::alignment::DEFAULT_BETA)]
    pub beta: f64,
    /// DPO-stage learning rate; defaults to --lr (repo extension).
    #[arg(long)]
    pub dpo_lr: Option<f64>,
    /// DPO-stage epochs; defaults to --epochs (repo extension).
    #[arg(long)]
    pub dpo_epochs: Option<usize>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// Final checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Intermediate RSFT checkpoint of rsft+dpo; default `<out>` with `.rsft` before the extension.
    #[arg(long)]
    pub rsft_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainRerankerArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Base model checkpoint; its vocabulary defines the feature space.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub labeled: PathBuf,
    /// Hinge margin (repo decision).
    #[arg(long, default_value_t = aqe_core::filtering::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Learning rate (repo decision).
    #[arg(long, default_value_t = aqe_core::filtering::RerankerTrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = aqe_core::filtering::RerankerTrainConfig::default().batch_size)]
    pub batch_size: usize,
    /// Epochs (repo decision).
    #[arg(long, default_value_t = aqe_core::filtering::RerankerTrainConfig::default().epochs)]
    pub epochs: usize,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// One question; the expansion goes to stdout.
    #[arg(long, conflicts_with = "queries")]
    pub question: Option<String>,
    /// Query JSONL; expansions go to --out.
    #[arg(long, requires = "out")]
    pub queries: Option<PathBuf>,
    /// Select among n samples with this reranker instead of decoding greedily.
    #[arg(long)]
    pub reranker: Option<PathBuf>,
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExpanderKind {
    Identity,
    ZeroShot,
    Aligned,
    Filtering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, value_enum)]
    pub expander: ExpanderKind,
    /// Model checkpoint (base model for zero-shot and filtering).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Reranker checkpoint for filtering.
    #[arg(long)]
    pub reranker: Option<PathBuf>,
    /// Row label in reports; defaults to the expander name.
    #[arg(long)]
    pub name: Option<String>,
    /// Comma-separated N values.
    #[arg(long, value_delimiter = ',', default_values_t = aqe_core::eval::DEFAULT_TOPN)]
    pub topn: Vec<usize>,
    #[command(flatten)]
    pub cutoff: CutoffArg,
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub seed: SeedArg,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    /// Report JSON; a `.timing.json` sidecar holds wall-clock times.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Evaluation reports; repeatable, at least two.
    #[arg(long = "report", required = true, num_args = 1)]
    pub reports: Vec<PathBuf>,
    /// Name of the report every other one is compared against; default the first.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Comma-separated N values; default the first report's.
    #[arg(long, value_delimiter = ',')]
    pub topn: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DiversityArgs {
    /// Index supplying idf weights.
    #[arg(long)]
    pub index: PathBuf,
    /// Evaluation report (.json) or expansions JSONL from `aqe infer`.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Aligned checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Base checkpoint sampled by the filtering pipeline.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub reranker: PathBuf,
    /// Only the first `limit` queries.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    #[command(flatten)]
    pub gen: GenArgs,
    #[command(flatten)]
    pub cutoff: CutoffArg,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: aqe_core::Error| e.to_string())
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Index(_) => "index",
            Command::Pretrain(_) => "pretrain",
            Command::Generate(_) => "generate",
            Command::Rank(_) => "rank",
            Command::Pairs(_) => "pairs",
            Command::Train(_) => "train",
            Command::TrainReranker(_) => "train-reranker",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Compare(_) => "compare",
            Command::Diversity(_) => "diversity",
            Command::Bench(_) => "bench",
            Command::Replay(_) => "replay",
        }
    }
}

/// Parses `argv` (program name first) and runs it. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let ctx = commands::Ctx {
        argv: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
        seed_override: None,
    };
    report(commands::dispatch(&cli.command, &ctx))
}

/// Exit code for a command outcome, printing the error if any.
pub fn report(outcome: CmdResult) -> i32 {
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
