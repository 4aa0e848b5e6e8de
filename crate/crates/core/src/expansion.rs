//! Prompting, candidate generation, rank labeling and best/worst pair construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{words, Document, QueryExample, TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::persist;
use crate::retrieval::{InvertedIndex, RankResult};
use crate::seed::derive_seed;
use crate::seqmodel::{greedy_decode_counted, sample_from, DecodeState, ModelConfig, ModelParams};

pub const PROMPT_SUFFIX: &str = "To answer this query, we need to know:";
pub const DEFAULT_N: usize = 50;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_TOP_K: usize = 50;
/// Hard cap on generated expansion length, EOS included.
pub const MAX_NEW_TOKENS: usize = 16;
pub const MODEL_KIND: &str = "aqe-model";

/// `question` (trimmed) followed by a space and the instruction suffix.
pub fn make_prompt(question: &str) -> Result<String> {
    let q = question.trim();
    if q.is_empty() {
        return Err(Error::invalid("question is empty"));
    }
    Ok(format!("{q} {PROMPT_SUFFIX}"))
}

/// The retrieval query: question, a space, then the expansion. An empty expansion adds nothing.
pub fn expanded_query(question: &str, expansion: &str) -> String {
    let (q, e) = (question.trim(), expansion.trim());
    match (q.is_empty(), e.is_empty()) {
        (_, true) => q.to_string(),
        (true, false) => e.to_string(),
        _ => format!("{q} {e}"),
    }
}

/// Sequence model plus the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionModel {
    pub params: ModelParams,
    pub vocab: Vocabulary,
}

impl ExpansionModel {
    pub fn new(params: ModelParams, vocab: Vocabulary) -> Result<Self> {
        if params.config.vocab_size != vocab.len() {
            return Err(Error::invalid(format!(
                "model vocab_size {} does not match vocabulary of {}",
                params.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(Self { params, vocab })
    }

    /// BOS followed by the tokenized prompt for `question`.
    pub fn prompt_tokens(&self, question: &str) -> Result<Vec<TokenId>> {
        let prompt = make_prompt(question)?;
        Ok(self.prompt_tokens_raw(&prompt))
    }

    /// BOS followed by the tokens of an already built prompt string.
    pub fn prompt_tokens_raw(&self, prompt: &str) -> Vec<TokenId> {
        let mut ids = vec![Vocabulary::BOS];
        ids.extend(crate::data::tokenize(prompt, &self.vocab).ids);
        ids
    }

    /// Tokenized expansion with EOS appended.
    pub fn target_tokens(&self, expansion: &str) -> Vec<TokenId> {
        let mut ids = crate::data::tokenize(expansion, &self.vocab).ids;
        ids.push(Vocabulary::EOS);
        ids
    }

    /// Single greedy expansion and the forward passes it took.
    pub fn greedy(&self, question: &str, max_new: usize) -> Result<(String, usize)> {
        let prompt = self.prompt_tokens(question)?;
        let max_new = max_new.min(self.params.config.max_len.saturating_sub(prompt.len()));
        if max_new == 0 {
            return Err(Error::LengthOverflow {
                len: prompt.len() + 1,
                max: self.params.config.max_len,
            });
        }
        let (ids, passes) = greedy_decode_counted(&self.params, &prompt, max_new)?;
        Ok((self.vocab.decode(&ids), passes))
    }

    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<String> {
        let meta = json!({
            "config": self.params.config,
            "vocab": self.vocab.tokens(),
            "provenance": provenance,
        });
        persist::save_container(path, MODEL_KIND, &meta, &self.params.tensors)
    }

    /// Loads a model checkpoint; returns the provenance block alongside.
    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<(Self, serde_json::Value)> {
        let c = persist::load_container(path, expected_digest)?;
        let corrupt = |message: String| Error::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        if c.kind != MODEL_KIND {
            return Err(corrupt(format!("expected a {MODEL_KIND} checkpoint, found {:?}", c.kind)));
        }
        let config: ModelConfig = serde_json::from_value(c.metadata["config"].clone())
            .map_err(|e| corrupt(format!("bad config: {e}")))?;
        let tokens: Vec<String> = serde_json::from_value(c.metadata["vocab"].clone())
            .map_err(|e| corrupt(format!("bad vocab: {e}")))?;
        let params = ModelParams::from_tensors(config, c.tensors)?;
        let model = Self::new(params, Vocabulary::from_tokens(tokens)?)?;
        Ok((model, c.metadata["provenance"].clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub n: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub max_new: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            temperature: DEFAULT_TEMPERATURE,
            top_k: DEFAULT_TOP_K,
            max_new: MAX_NEW_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "CandidateRecord", into = "CandidateRecord")]
pub struct ExpansionCandidate {
    pub query_id: String,
    pub text: String,
    pub sample_index: usize,
    pub rank: Option<RankResult>,
}

/// JSONL shape: the rank and the cutoff it was measured at are flat optional fields.
#[derive(Serialize, Deserialize)]
struct CandidateRecord {
    query_id: String,
    text: String,
    sample_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cutoff: Option<usize>,
}

impl From<CandidateRecord> for ExpansionCandidate {
    fn from(r: CandidateRecord) -> Self {
        let rank = r.rank.map(|rank| RankResult {
            rank,
            cutoff: r.cutoff.unwrap_or(crate::retrieval::DEFAULT_CUTOFF),
        });
        Self {
            query_id: r.query_id,
            text: r.text,
            sample_index: r.sample_index,
            rank,
        }
    }
}

impl From<ExpansionCandidate> for CandidateRecord {
    fn from(c: ExpansionCandidate) -> Self {
        Self {
            query_id: c.query_id,
            text: c.text,
            sample_index: c.sample_index,
            rank: c.rank.map(|r| r.rank),
            cutoff: c.rank.map(|r| r.cutoff),
        }
    }
}

/// `n` sampled expansions for one query with per-sample seeds from (seed, query id, index).
/// Returns the candidates and the model forward passes spent.
pub fn generate_candidates(
    model: &ExpansionModel,
    query_id: &str,
    question: &str,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<(Vec<ExpansionCandidate>, usize)> {
    if cfg.n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let prompt = model.prompt_tokens(question)?;
    let max_new = cfg.max_new.min(model.params.config.max_len.saturating_sub(prompt.len()));
    if max_new == 0 {
        return Err(Error::LengthOverflow {
            len: prompt.len() + 1,
            max: model.params.config.max_len,
        });
    }
    let state = DecodeState::prefill(&model.params, &prompt)?;
    let mut passes = 0;
    let mut out = Vec::with_capacity(cfg.n);
    for j in 0..cfg.n {
        let s = derive_seed(seed, query_id, j as u64);
        let (ids, p) = sample_from(&model.params, state.clone(), cfg.temperature, cfg.top_k, max_new, s)?;
        passes += p;
        out.push(ExpansionCandidate {
            query_id: query_id.to_string(),
            text: model.vocab.decode(&ids),
            sample_index: j,
            rank: None,
        });
    }
    Ok((out, passes))
}

/// Candidates for every query, generated in parallel and returned in input order.
pub fn generate_all(
    model: &ExpansionModel,
    queries: &[QueryExample],
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<Vec<ExpansionCandidate>> {
    let per_query: Vec<Vec<ExpansionCandidate>> = queries
        .par_iter()
        .map(|q| generate_candidates(model, &q.id, &q.question, cfg, seed).map(|(c, _)| c))
        .collect::<Result<_>>()?;
    Ok(per_query.into_iter().flatten().collect())
}

/// Labels each candidate with the gold rank of its expanded query.
pub fn rank_candidates(
    index: &InvertedIndex,
    example: &QueryExample,
    candidates: &[ExpansionCandidate],
    cutoff: usize,
) -> Result<Vec<ExpansionCandidate>> {
    candidates
        .iter()
        .map(|c| {
            if c.query_id != example.id {
                return Err(Error::invalid(format!(
                    "candidate for {} passed with query {}",
                    c.query_id, example.id
                )));
            }
            let rank = index.rank_of_gold(&expanded_query(&example.question, &c.text), &example.gold_doc_ids, cutoff);
            Ok(ExpansionCandidate {
                rank: Some(rank),
                ..c.clone()
            })
        })
        .collect()
}

/// Groups candidates by query id, keeping first-seen query order and sample order within a query.
pub fn group_by_query(candidates: &[ExpansionCandidate]) -> Vec<(String, Vec<ExpansionCandidate>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<ExpansionCandidate>> = BTreeMap::new();
    for c in candidates {
        let g = groups.entry(c.query_id.clone()).or_insert_with(|| {
            order.push(c.query_id.clone());
            Vec::new()
        });
        g.push(c.clone());
    }
    order
        .into_iter()
        .map(|id| {
            let g = groups.remove(&id).expect("grouped");
            (id, g)
        })
        .collect()
}

/// Labels a flat candidate list against its queries, in parallel across queries.
pub fn rank_all(
    index: &InvertedIndex,
    queries: &[QueryExample],
    candidates: &[ExpansionCandidate],
    cutoff: usize,
) -> Result<Vec<ExpansionCandidate>> {
    let by_id: BTreeMap<&str, &QueryExample> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let groups = group_by_query(candidates);
    let labeled: Vec<Vec<ExpansionCandidate>> = groups
        .par_iter()
        .map(|(qid, cands)| {
            let q = by_id
                .get(qid.as_str())
                .ok_or_else(|| Error::invalid(format!("candidates reference unknown query {qid}")))?;
            rank_candidates(index, q, cands, cutoff)
        })
        .collect::<Result<_>>()?;
    Ok(labeled.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query_id: String,
    pub best: String,
    pub worst: String,
    pub rank_best: usize,
    pub rank_worst: usize,
}

fn labeled_rank(c: &ExpansionCandidate) -> Result<RankResult> {
    c.rank.ok_or_else(|| {
        Error::invalid(format!(
            "candidate {} of {} is not labeled",
            c.sample_index, c.query_id
        ))
    })
}

/// Indices of the lowest- and highest-rank candidates, ties to the lowest sample index.
fn best_and_worst(candidates: &[ExpansionCandidate]) -> Result<(usize, usize)> {
    if candidates.is_empty() {
        return Err(Error::invalid("empty candidate list"));
    }
    let mut best = 0;
    let mut worst = 0;
    for (i, c) in candidates.iter().enumerate() {
        let r = labeled_rank(c)?.rank;
        let key = |k: usize| (candidates[k].rank.expect("checked").rank, candidates[k].sample_index);
        if (r, c.sample_index) < key(best) {
            best = i;
        }
        // the highest rank wins; among equals the lowest sample index
        if r > key(worst).0 || (r == key(worst).0 && c.sample_index < key(worst).1) {
            worst = i;
        }
    }
    Ok((best, worst))
}

/// Best/worst pair for one query's labeled candidates. `None` when every rank is
/// equal or when even the best candidate missed the gold document.
pub fn build_preference_pair(candidates: &[ExpansionCandidate]) -> Result<Option<PreferencePair>> {
    let (b, w) = best_and_worst(candidates)?;
    let (cb, cw) = (&candidates[b], &candidates[w]);
    let (rb, rw) = (labeled_rank(cb)?, labeled_rank(cw)?);
    if rb.is_sentinel() || rb.rank == rw.rank {
        return Ok(None);
    }
    Ok(Some(PreferencePair {
        query_id: cb.query_id.clone(),
        best: cb.text.clone(),
        worst: cw.text.clone(),
        rank_best: rb.rank,
        rank_worst: rw.rank,
    }))
}

/// Pairs for every query group of a flat labeled list, in first-seen query order.
pub fn build_pairs(labeled: &[ExpansionCandidate]) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (_, group) in group_by_query(labeled) {
        if let Some(p) = build_preference_pair(&group)? {
            out.push(p);
        }
    }
    Ok(out)
}

/// One supervised (prompt, target) example. EOS is appended when the target is tokenized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsftExample {
    pub query_id: String,
    pub prompt: String,
    pub target: String,
}

/// The best expansion of every query whose best rank is not the sentinel.
pub fn build_rsft_set(queries: &[QueryExample], labeled: &[ExpansionCandidate]) -> Result<Vec<RsftExample>> {
    let by_id: BTreeMap<&str, &QueryExample> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut out = Vec::new();
    for (qid, group) in group_by_query(labeled) {
        let (b, _) = best_and_worst(&group)?;
        if labeled_rank(&group[b])?.is_sentinel() {
            continue;
        }
        let q = by_id
            .get(qid.as_str())
            .ok_or_else(|| Error::invalid(format!("candidates reference unknown query {qid}")))?;
        out.push(RsftExample {
            query_id: qid.clone(),
            prompt: make_prompt(&q.question)?,
            target: group[b].text.clone(),
        });
    }
    Ok(out)
}

/// Self-supervised pairs for the base model: a few words of a document stand in for
/// the question and the document's remaining words are the continuation.
pub fn pretrain_examples(docs: &[Document], per_doc: usize, seed: u64) -> Result<Vec<RsftExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(docs.len() * per_doc);
    for d in docs {
        let ws: Vec<String> = words(&d.text).collect();
        if ws.len() < 2 {
            continue;
        }
        for j in 0..per_doc {
            let mut shuffled = ws.clone();
            shuffled.shuffle(&mut rng);
            let k = rng.gen_range(1..=(ws.len() / 2).max(1));
            let (q, rest) = shuffled.split_at(k);
            out.push(RsftExample {
                query_id: format!("{}#{j}", d.id),
                prompt: make_prompt(&q.join(" "))?,
                target: rest.join(" "),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no document has at least two words"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, extend_vocab};
    use crate::seqmodel::{greedy_decode, init_model};

    fn cand(i: usize, rank: usize, cutoff: usize) -> ExpansionCandidate {
        ExpansionCandidate {
            query_id: "q".into(),
            text: format!("t{i}"),
            sample_index: i,
            rank: Some(if rank > cutoff {
                RankResult::missed(cutoff)
            } else {
                RankResult::found(rank, cutoff)
            }),
        }
    }

    fn toy_model(seed: u64) -> ExpansionModel {
        let docs = vec![Document {
            id: "d".into(),
            text: "alpha beta gamma delta".into(),
        }];
        let v = build_vocab(&docs, &[], 1).unwrap();
        let v = extend_vocab(&v, words(PROMPT_SUFFIX).chain(words("who wrote x"))).unwrap();
        let mut cfg = ModelConfig::reference(v.len(), seed);
        cfg.dim = 16;
        cfg.n_heads = 2;
        cfg.init_std = 0.5;
        ExpansionModel::new(init_model(&cfg).unwrap(), v).unwrap()
    }

    #[test]
    fn prompt_examples() {
        assert_eq!(
            make_prompt("who wrote x").unwrap(),
            "who wrote x To answer this query, we need to know:"
        );
        assert_eq!(make_prompt("  q  ").unwrap(), make_prompt("q").unwrap());
        assert!(make_prompt("   ").is_err());
    }

    #[test]
    fn expanded_query_examples() {
        assert_eq!(
            expanded_query("who sings", "Regina Spektor sings the theme song"),
            "who sings Regina Spektor sings the theme song"
        );
        assert_eq!(expanded_query("who sings", ""), "who sings");
    }

    #[test]
    fn pair_examples() {
        let c = vec![cand(0, 3, 100), cand(1, 1, 100), cand(2, 7, 100)];
        let p = build_preference_pair(&c).unwrap().unwrap();
        assert_eq!((p.best.as_str(), p.worst.as_str()), ("t1", "t2"));
        assert_eq!((p.rank_best, p.rank_worst), (1, 7));

        let same = vec![cand(0, 5, 100), cand(1, 5, 100), cand(2, 5, 100)];
        assert_eq!(build_preference_pair(&same).unwrap(), None);
        let failed = vec![cand(0, 101, 100), cand(1, 101, 100)];
        assert_eq!(build_preference_pair(&failed).unwrap(), None);
        assert!(build_preference_pair(&[]).is_err());
    }

    #[test]
    fn ties_go_to_lowest_sample_index() {
        let c = vec![cand(0, 4, 10), cand(1, 2, 10), cand(2, 2, 10), cand(3, 4, 10)];
        let p = build_preference_pair(&c).unwrap().unwrap();
        assert_eq!((p.best.as_str(), p.worst.as_str()), ("t1", "t0"));
        let mut rev = c.clone();
        rev.reverse();
        assert_eq!(build_preference_pair(&rev).unwrap().unwrap(), p);
    }

    #[test]
    fn rsft_set_skips_failed_queries() {
        let queries = vec![
            QueryExample {
                id: "a".into(),
                question: "first".into(),
                gold_doc_ids: vec!["d".into()],
            },
            QueryExample {
                id: "b".into(),
                question: "second".into(),
                gold_doc_ids: vec!["d".into()],
            },
        ];
        let mut c = vec![cand(0, 1, 10), cand(1, 11, 10), cand(0, 11, 10)];
        c[0].query_id = "a".into();
        c[1].query_id = "a".into();
        c[2].query_id = "b".into();
        let set = build_rsft_set(&queries, &c).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set[0].target, "t0");
        assert_eq!(set[0].prompt, make_prompt("first").unwrap());
    }

    #[test]
    fn ranking_with_unique_term_and_noise() {
        let docs: Vec<Document> = ["apple tree", "banana split", "cherry pie zebra"]
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                id: format!("d{i}"),
                text: t.to_string(),
            })
            .collect();
        let idx = InvertedIndex::build(&docs, 1.2, 0.75).unwrap();
        let q = QueryExample {
            id: "q".into(),
            question: "what".into(),
            gold_doc_ids: vec!["d2".into()],
        };
        let mk = |i: usize, t: &str| ExpansionCandidate {
            query_id: "q".into(),
            text: t.into(),
            sample_index: i,
            rank: None,
        };
        let cands = vec![mk(0, "zebra"), mk(1, "qqq rrr"), mk(2, "zebra")];
        let out = rank_candidates(&idx, &q, &cands, 100).unwrap();
        assert_eq!(out[0].rank, Some(RankResult::found(1, 100)));
        assert_eq!(out[1].rank, Some(RankResult::missed(100)));
        assert_eq!(out[0].rank, out[2].rank);
        let wrong = vec![ExpansionCandidate {
            query_id: "other".into(),
            ..cands[0].clone()
        }];
        assert!(rank_candidates(&idx, &q, &wrong, 100).is_err());
    }

    #[test]
    fn n1_top1_is_greedy() {
        let m = toy_model(3);
        let cfg = GenerationConfig {
            n: 1,
            top_k: 1,
            ..Default::default()
        };
        let (c, _) = generate_candidates(&m, "q", "who wrote x", &cfg, 9).unwrap();
        let prompt = m.prompt_tokens("who wrote x").unwrap();
        let g = greedy_decode(&m.params, &prompt, MAX_NEW_TOKENS).unwrap();
        assert_eq!(c[0].text, m.vocab.decode(&g));
        assert_eq!(m.greedy("who wrote x", MAX_NEW_TOKENS).unwrap().0, c[0].text);
    }

    #[test]
    fn generation_is_deterministic() {
        let m = toy_model(4);
        let cfg = GenerationConfig {
            n: 6,
            ..Default::default()
        };
        let a = generate_candidates(&m, "q", "who wrote x", &cfg, 1).unwrap();
        let b = generate_candidates(&m, "q", "who wrote x", &cfg, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.iter().map(|c| c.sample_index).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
        let (_, passes) = &a;
        let tokens: usize = a.0.iter().map(|c| c.text.split_whitespace().count()).sum();
        assert!(*passes >= tokens);
        assert_eq!(GenerationConfig::default().n, 50);
    }

    #[test]
    fn candidate_jsonl_shape() {
        let c = cand(2, 7, 100);
        let line = serde_json::to_string(&c).unwrap();
        assert_eq!(
            line,
            r#"{"query_id":"q","text":"t2","sample_index":2,"rank":7,"cutoff":100}"#
        );
        assert_eq!(serde_json::from_str::<ExpansionCandidate>(&line).unwrap(), c);
        let unlabeled = ExpansionCandidate { rank: None, ..c };
        let line = serde_json::to_string(&unlabeled).unwrap();
        assert_eq!(line, r#"{"query_id":"q","text":"t2","sample_index":2}"#);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = toy_model(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let digest = m.save(&path, json!({"method": "base", "seed": 5})).unwrap();
        let (back, prov) = ExpansionModel::load(&path, Some(&digest)).unwrap();
        assert_eq!(back, m);
        assert_eq!(prov["method"], "base");
        assert_eq!(prov["seed"], 5);
    }

    #[test]
    fn pretrain_examples_split_documents() {
        let docs = vec![Document {
            id: "d".into(),
            text: "a b c d e f".into(),
        }];
        let ex = pretrain_examples(&docs, 3, 0).unwrap();
        assert_eq!(ex.len(), 3);
        for e in &ex {
            let q = e.prompt.strip_suffix(PROMPT_SUFFIX).unwrap();
            assert_eq!(q.split_whitespace().count() + e.target.split_whitespace().count(), 6);
        }
        assert_eq!(ex, pretrain_examples(&docs, 3, 0).unwrap());
    }
}
