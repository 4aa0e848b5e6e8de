//! Glue between the stages: model vocabulary, tokenized training sets, base-model
//! pretraining, and an in-process end-to-end experiment on synthetic data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::alignment::{self, attach_reference, dpo_stats, run_pipeline, Method, SeqExample, SeqPair, TrainConfig};
use crate::data::{build_vocab, extend_vocab, gen_synthetic, words, Document, QueryExample, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Expander};
use crate::expansion::{
    build_pairs, build_rsft_set, generate_all, group_by_query, pretrain_examples, rank_all, ExpansionCandidate,
    ExpansionModel, GenerationConfig, PreferencePair, RsftExample, PROMPT_SUFFIX,
};
use crate::filtering::{train_reranker, FeatureSpace, RerankItem, RerankerParams, RerankerTrainConfig};
use crate::retrieval::InvertedIndex;
use crate::seed::derive_seed;
use crate::seqmodel::{init_model, ModelConfig};

/// Corpus and training-question words plus the prompt suffix words.
pub fn model_vocab(docs: &[Document], train_queries: &[QueryExample]) -> Result<Vocabulary> {
    let v = build_vocab(docs, train_queries, 1)?;
    extend_vocab(&v, words(PROMPT_SUFFIX))
}

fn check_fits(model: &ExpansionModel, prompt: &[u32], target: &[u32], what: &str) -> Result<()> {
    let len = prompt.len() + target.len();
    if len > model.params.config.max_len {
        return Err(Error::invalid(format!(
            "{what}: {len} tokens exceed the model's max length {}",
            model.params.config.max_len
        )));
    }
    Ok(())
}

pub fn tokenize_rsft(model: &ExpansionModel, set: &[RsftExample]) -> Result<Vec<SeqExample>> {
    set.iter()
        .map(|e| {
            let prompt = model.prompt_tokens_raw(&e.prompt);
            let target = model.target_tokens(&e.target);
            check_fits(model, &prompt, &target, &e.query_id)?;
            Ok(SeqExample { prompt, target })
        })
        .collect()
}

pub fn tokenize_pairs(model: &ExpansionModel, queries: &[QueryExample], pairs: &[PreferencePair]) -> Result<Vec<SeqPair>> {
    let by_id: BTreeMap<&str, &QueryExample> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    pairs
        .iter()
        .map(|p| {
            let q = by_id
                .get(p.query_id.as_str())
                .ok_or_else(|| Error::invalid(format!("pair references unknown query {}", p.query_id)))?;
            let prompt = model.prompt_tokens(&q.question)?;
            let best = model.target_tokens(&p.best);
            let worst = model.target_tokens(&p.worst);
            check_fits(model, &prompt, &best, &p.query_id)?;
            check_fits(model, &prompt, &worst, &p.query_id)?;
            Ok(SeqPair { prompt, best, worst })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Training examples cut from each document.
    pub per_doc: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            per_doc: 4,
            lr: 3e-3,
            batch_size: 16,
            epochs: 5,
            seed: 0,
        }
    }
}

/// Trains a fresh model to continue document fragments with the rest of the document.
/// This stands in for the general-purpose model that alignment starts from.
pub fn pretrain(
    model_config: &ModelConfig,
    vocab: Vocabulary,
    docs: &[Document],
    cfg: &PretrainConfig,
) -> Result<(ExpansionModel, alignment::LossTrace)> {
    let init = ExpansionModel::new(init_model(model_config)?, vocab)?;
    let examples = pretrain_examples(docs, cfg.per_doc, derive_seed(cfg.seed, "pretrain-examples", 0))?;
    let seqs = tokenize_rsft(&init, &examples)?;
    let tc = TrainConfig {
        method: Method::Rsft,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        beta: alignment::DEFAULT_BETA,
        seed: cfg.seed,
        dpo_lr: None,
        dpo_epochs: None,
    };
    let (params, trace) = alignment::train_rsft(&init.params, &seqs, &tc)?;
    Ok((ExpansionModel::new(params, init.vocab)?, trace))
}

/// Reranker feature space: the model's non-special words, idf from the index.
pub fn reranker_space(index: &InvertedIndex, vocab: &Vocabulary) -> Result<FeatureSpace> {
    FeatureSpace::from_index(index, vocab.tokens().iter().skip(Vocabulary::SPECIALS.len()).cloned())
}

/// Reranker training items from labeled candidates.
pub fn rerank_items(queries: &[QueryExample], labeled: &[ExpansionCandidate]) -> Result<Vec<RerankItem>> {
    let by_id: BTreeMap<&str, &QueryExample> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    group_by_query(labeled)
        .into_iter()
        .map(|(qid, candidates)| {
            let q = by_id
                .get(qid.as_str())
                .ok_or_else(|| Error::invalid(format!("candidates reference unknown query {qid}")))?;
            Ok(RerankItem {
                question: q.question.clone(),
                candidates,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_docs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub mismatch_rate: f64,
    pub seed: u64,
    pub k1: f64,
    pub b: f64,
    pub cutoff: usize,
    pub ns: Vec<usize>,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub init_std: f64,
    pub pretrain: PretrainConfig,
    pub generation: GenerationConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub dpo_lr: Option<f64>,
    pub dpo_epochs: Option<usize>,
    pub alpha: f64,
    pub reranker: RerankerTrainConfig,
}

impl ExperimentConfig {
    /// Synthetic desk-scale setup: 500 documents, 200 training and 100 test queries,
    /// 70% of queries phrased with synonyms absent from the corpus. Learning rates and
    /// epochs are far above the CLI defaults because the model starts from scratch; see
    /// docs/PILOTS.md.
    pub fn toy(seed: u64) -> Self {
        Self {
            n_docs: 500,
            n_train: 200,
            n_test: 100,
            mismatch_rate: 0.7,
            seed,
            k1: crate::retrieval::DEFAULT_K1,
            b: crate::retrieval::DEFAULT_B,
            cutoff: crate::retrieval::DEFAULT_CUTOFF,
            ns: crate::eval::DEFAULT_TOPN.to_vec(),
            dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 64,
            init_std: 0.02,
            pretrain: PretrainConfig {
                seed,
                ..PretrainConfig::default()
            },
            generation: GenerationConfig::default(),
            lr: 3e-3,
            batch_size: 16,
            epochs: 20,
            beta: 0.1,
            dpo_lr: Some(1e-3),
            dpo_epochs: Some(5),
            alpha: crate::filtering::DEFAULT_ALPHA,
            reranker: RerankerTrainConfig {
                seed,
                ..RerankerTrainConfig::default()
            },
        }
    }

    fn train_config(&self, method: Method) -> TrainConfig {
        TrainConfig {
            method,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            beta: self.beta,
            seed: derive_seed(self.seed, "align", 0),
            dpo_lr: self.dpo_lr,
            dpo_epochs: self.dpo_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoSummary {
    pub pairs: usize,
    pub initial_loss: f64,
    pub initial_margin: f64,
    /// After the first DPO epoch.
    pub epoch1_loss: f64,
    pub epoch1_margin: f64,
    pub final_loss: f64,
    pub final_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rsft_examples: usize,
    pub pairs: usize,
    /// Test-set reports keyed by method name.
    pub reports: BTreeMap<String, EvalReport>,
    /// Training-pair statistics of the DPO-only run.
    pub dpo: DpoSummary,
    /// Parameter digests keyed by method name.
    pub digests: BTreeMap<String, String>,
}

/// What an experiment trained, for follow-up measurements such as latency.
#[derive(Debug, Clone)]
pub struct ExperimentArtifacts {
    pub index: InvertedIndex,
    pub test: Vec<QueryExample>,
    pub base: ExpansionModel,
    /// Aligned models keyed by method name.
    pub models: BTreeMap<String, ExpansionModel>,
    pub reranker: RerankerParams,
}

/// Synthetic data, index, pretraining, candidate labeling, the three alignment
/// pipelines, the filtering baseline, and test-set evaluation of every method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    Ok(run_experiment_with_artifacts(cfg)?.0)
}

pub fn run_experiment_with_artifacts(cfg: &ExperimentConfig) -> Result<(ExperimentResult, ExperimentArtifacts)> {
    let ds = gen_synthetic(cfg.n_docs, cfg.n_train + cfg.n_test, cfg.mismatch_rate, cfg.seed)?;
    let (train, test) = ds.queries.split_at(cfg.n_train);
    let index = InvertedIndex::build(&ds.docs, cfg.k1, cfg.b)?;
    let text: Vec<Document> = ds.docs.iter().chain(&ds.background).cloned().collect();
    let vocab = model_vocab(&text, train)?;
    let mc = ModelConfig {
        vocab_size: vocab.len(),
        n_layers: cfg.n_layers,
        dim: cfg.dim,
        n_heads: cfg.n_heads,
        max_len: cfg.max_len,
        seed: derive_seed(cfg.seed, "init", 0),
        init_std: cfg.init_std,
    };
    let (base, _) = pretrain(&mc, vocab, &text, &cfg.pretrain)?;

    let gen_seed = derive_seed(cfg.seed, "generate", 0);
    let cands = generate_all(&base, train, &cfg.generation, gen_seed)?;
    let labeled = rank_all(&index, train, &cands, cfg.cutoff)?;
    let pairs = build_pairs(&labeled)?;
    let rsft = build_rsft_set(train, &labeled)?;
    let rsft_seq = tokenize_rsft(&base, &rsft)?;
    let pair_seq = tokenize_pairs(&base, train, &pairs)?;

    let mut models: BTreeMap<String, ExpansionModel> = BTreeMap::new();
    let mut dpo = None;
    for method in [Method::Rsft, Method::Dpo, Method::RsftDpo] {
        let tc = cfg.train_config(method);
        let run = run_pipeline(&base.params, &rsft_seq, Some(&pair_seq), &tc)?;
        if method == Method::Dpo {
            let items = attach_reference(&base.params, &pair_seq)?;
            let (l0, m0) = dpo_stats(&base.params, &items, cfg.beta)?;
            let (l1, m1) = dpo_stats(&run.params, &items, cfg.beta)?;
            let one = TrainConfig {
                dpo_epochs: Some(1),
                ..tc
            };
            let first = run_pipeline(&base.params, &rsft_seq, Some(&pair_seq), &one)?;
            let (le, me) = dpo_stats(&first.params, &items, cfg.beta)?;
            dpo = Some(DpoSummary {
                pairs: items.len(),
                initial_loss: l0,
                initial_margin: m0,
                epoch1_loss: le,
                epoch1_margin: me,
                final_loss: l1,
                final_margin: m1,
            });
        }
        models.insert(method.as_str().to_string(), ExpansionModel::new(run.params, base.vocab.clone())?);
    }

    let space = reranker_space(&index, &base.vocab)?;
    let rp = RerankerParams::new(space, cfg.alpha)?;
    let (rp, _) = train_reranker(&rp, &rerank_items(train, &labeled)?, &cfg.reranker)?;

    let mut reports = BTreeMap::new();
    let eval = |e: Expander<'_>| evaluate(&index, test, &e, &cfg.ns, cfg.cutoff).map(|(r, _)| r);
    reports.insert("identity".to_string(), eval(Expander::Identity)?);
    reports.insert("zero-shot".to_string(), eval(Expander::ZeroShot(&base))?);
    reports.insert(
        "filtering".to_string(),
        eval(Expander::Filtering {
            model: &base,
            reranker: &rp,
            generation: cfg.generation,
            seed: derive_seed(cfg.seed, "filter", 0),
        })?,
    );
    for (name, m) in &models {
        let mut r = eval(Expander::Aligned(m))?;
        r.expander = name.clone();
        reports.insert(name.clone(), r);
    }
    let mut digests: BTreeMap<String, String> = models.iter().map(|(k, m)| (k.clone(), m.params.digest())).collect();
    digests.insert("zero-shot".into(), base.params.digest());
    digests.insert("reranker".into(), crate::tensor::digest(std::slice::from_ref(&rp.w)));
    let result = ExperimentResult {
        rsft_examples: rsft.len(),
        pairs: pairs.len(),
        reports,
        dpo: dpo.expect("dpo run"),
        digests,
    };
    let artifacts = ExperimentArtifacts {
        index,
        test: test.to_vec(),
        base,
        models,
        reranker: rp,
    };
    Ok((result, artifacts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_covers_prompt_suffix() {
        let ds = gen_synthetic(30, 10, 0.5, 1).unwrap();
        let v = model_vocab(&ds.docs, &ds.queries).unwrap();
        for w in words(PROMPT_SUFFIX) {
            assert!(v.id(&w).is_some(), "{w}");
        }
        for q in &ds.queries {
            for w in words(&q.question) {
                assert!(v.id(&w).is_some(), "{w}");
            }
        }
    }

    #[test]
    fn tiny_experiment_is_deterministic() {
        let mut cfg = ExperimentConfig::toy(3);
        cfg.n_docs = 40;
        cfg.n_train = 12;
        cfg.n_test = 6;
        cfg.dim = 16;
        cfg.n_heads = 2;
        cfg.pretrain.epochs = 1;
        cfg.generation.n = 4;
        cfg.epochs = 1;
        cfg.ns = vec![1, 5];
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.reports.len(), 6);
        assert_eq!(a.dpo.initial_margin, 0.0);
        cfg.dpo_epochs = Some(1);
        let c = run_experiment(&cfg).unwrap();
        assert_eq!(c.dpo.final_margin, a.dpo.epoch1_margin);
    }
}
