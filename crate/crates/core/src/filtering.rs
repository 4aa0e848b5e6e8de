//! Generate-then-filter baseline: a bilinear tf-idf reranker trained with a pairwise
//! rank hinge, and best-of-n selection under it.
//!
//! Scores follow the hinge as written: for candidates with ranks `r_i < r_j` the loss
//! term is `max(0, M_i - M_j + alpha * (r_j - r_i))`, which is minimized by `M_i < M_j`.
//! A lower score therefore means a better predicted expansion and selection is argmin.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::words;
use crate::error::{Error, Result};
use crate::expansion::ExpansionCandidate;
use crate::persist;
use crate::retrieval::InvertedIndex;
use crate::seed::derive_seed;
use crate::seqmodel::{adamw_step, AdamWConfig, Objective, OptimizerState};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const RERANKER_KIND: &str = "aqe-reranker";

/// Sparse feature vector: (feature index, value), sorted by index.
pub type Features = Vec<(usize, f64)>;

/// Word-level tf-idf feature space with fixed idf weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpace {
    words: Vec<String>,
    idf: Vec<f64>,
    index: HashMap<String, usize>,
}

impl FeatureSpace {
    pub fn new(words: Vec<String>, idf: Vec<f64>) -> Result<Self> {
        if words.len() != idf.len() {
            return Err(Error::invalid("feature words and idf differ in length"));
        }
        if idf.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite idf"));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate feature word {w:?}")));
            }
        }
        Ok(Self { words, idf, index })
    }

    /// Features over `words` with idf taken from the index.
    pub fn from_index<I: IntoIterator<Item = String>>(index: &InvertedIndex, words: I) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let words: Vec<String> = words.into_iter().filter(|w| seen.insert(w.clone())).collect();
        let idf = words.iter().map(|w| index.idf_of_word(w)).collect();
        Self::new(words, idf)
    }

    pub fn dim(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn idf(&self) -> &[f64] {
        &self.idf
    }

    /// L2-normalized tf-idf vector; words outside the space are ignored.
    pub fn features(&self, text: &str) -> Features {
        let mut acc: HashMap<usize, f64> = HashMap::new();
        for w in words(text) {
            if let Some(&i) = self.index.get(&w) {
                *acc.entry(i).or_insert(0.0) += self.idf[i];
            }
        }
        let mut v: Features = acc.into_iter().filter(|&(_, x)| x != 0.0).collect();
        v.sort_by_key(|&(i, _)| i);
        let norm = v.iter().map(|&(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, x) in &mut v {
                *x /= norm;
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankerParams {
    pub space: FeatureSpace,
    /// `[dim, dim]`, question features by expansion features.
    pub w: Tensor,
    pub alpha: f64,
}

impl RerankerParams {
    /// Zero weights: every expansion scores 0 until trained.
    pub fn new(space: FeatureSpace, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        let d = space.dim();
        Ok(Self {
            space,
            w: Tensor::zeros("w", &[d, d]),
            alpha,
        })
    }

    fn bilinear(&self, fq: &Features, fe: &Features) -> f64 {
        let d = self.space.dim();
        let mut s = 0.0;
        for &(i, qi) in fq {
            let row = &self.w.data[i * d..(i + 1) * d];
            for &(j, ej) in fe {
                s += qi * row[j] * ej;
            }
        }
        s
    }

    pub fn save(&self, path: &Path, provenance: serde_json::Value) -> Result<String> {
        let meta = json!({
            "alpha": self.alpha,
            "words": self.space.words,
            "idf": self.space.idf,
            "provenance": provenance,
        });
        persist::save_container(path, RERANKER_KIND, &meta, std::slice::from_ref(&self.w))
    }

    pub fn load(path: &Path, expected_digest: Option<&str>) -> Result<(Self, serde_json::Value)> {
        let c = persist::load_container(path, expected_digest)?;
        let corrupt = |message: String| Error::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        if c.kind != RERANKER_KIND {
            return Err(corrupt(format!("expected a {RERANKER_KIND} checkpoint, found {:?}", c.kind)));
        }
        let words: Vec<String> =
            serde_json::from_value(c.metadata["words"].clone()).map_err(|e| corrupt(format!("bad words: {e}")))?;
        let idf: Vec<f64> =
            serde_json::from_value(c.metadata["idf"].clone()).map_err(|e| corrupt(format!("bad idf: {e}")))?;
        let alpha = c.metadata["alpha"]
            .as_f64()
            .ok_or_else(|| corrupt("missing alpha".into()))?;
        let mut rp = Self::new(FeatureSpace::new(words, idf)?, alpha)?;
        let w = c.tensors.into_iter().next().ok_or_else(|| corrupt("missing weight tensor".into()))?;
        if w.shape != rp.w.shape || w.name != "w" || !w.is_finite() {
            return Err(Error::Shape {
                name: w.name,
                expected: rp.w.shape,
                actual: w.shape,
            });
        }
        rp.w = w;
        Ok((rp, c.metadata["provenance"].clone()))
    }
}

/// `M(q, e) = f(q)^T W f(e)`. Lower is better.
pub fn reranker_score(rp: &RerankerParams, question: &str, expansion: &str) -> f64 {
    rp.bilinear(&rp.space.features(question), &rp.space.features(expansion))
}

/// Sum of hinge terms over candidate pairs with different ranks, evaluated from
/// precomputed scores. Returns the loss and dLoss/dM per candidate.
pub fn hinge_from_scores(scores: &[f64], ranks: &[usize], alpha: f64) -> Result<(f64, Vec<f64>)> {
    let n = scores.len();
    let mut loss = 0.0;
    let mut dm = vec![0.0; n];
    let mut pairs = 0;
    for i in 0..n {
        for j in 0..n {
            if ranks[i] >= ranks[j] {
                continue;
            }
            pairs += 1;
            let t = scores[i] - scores[j] + alpha * (ranks[j] - ranks[i]) as f64;
            if t > 0.0 {
                loss += t;
                dm[i] += 1.0;
                dm[j] -= 1.0;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::invalid("all candidate ranks are equal; no pairs to rank"));
    }
    Ok((loss, dm))
}

fn candidate_ranks(candidates: &[ExpansionCandidate]) -> Result<Vec<usize>> {
    candidates
        .iter()
        .map(|c| {
            c.rank.map(|r| r.rank).ok_or_else(|| {
                Error::invalid(format!("candidate {} of {} is not labeled", c.sample_index, c.query_id))
            })
        })
        .collect()
}

/// Adds `scale * dLoss/dW` for one query into `grad` and returns the loss.
fn accumulate_rank_loss(
    rp: &RerankerParams,
    fq: &Features,
    fes: &[Features],
    ranks: &[usize],
    alpha: f64,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let scores: Vec<f64> = fes.iter().map(|fe| rp.bilinear(fq, fe)).collect();
    let (loss, dm) = hinge_from_scores(&scores, ranks, alpha)?;
    // dM_k/dW = f(q) f(e_k)^T, so dLoss/dW = f(q) (sum_k dm_k f(e_k))^T
    let d = rp.space.dim();
    let mut combo: HashMap<usize, f64> = HashMap::new();
    for (fe, &c) in fes.iter().zip(&dm) {
        if c == 0.0 {
            continue;
        }
        for &(j, v) in fe {
            *combo.entry(j).or_insert(0.0) += c * v;
        }
    }
    let mut combo: Vec<(usize, f64)> = combo.into_iter().collect();
    combo.sort_by_key(|&(j, _)| j);
    for &(i, qi) in fq {
        for &(j, v) in &combo {
            grad[i * d + j] += scale * qi * v;
        }
    }
    Ok(loss)
}

/// Hinge loss of one query's labeled candidates and its gradient with respect to `W`.
pub fn rank_loss(
    rp: &RerankerParams,
    question: &str,
    candidates: &[ExpansionCandidate],
    alpha: f64,
) -> Result<(f64, Tensor)> {
    let ranks = candidate_ranks(candidates)?;
    let fq = rp.space.features(question);
    let fes: Vec<Features> = candidates.iter().map(|c| rp.space.features(&c.text)).collect();
    let mut g = Tensor::zeros("w", &rp.w.shape);
    let loss = accumulate_rank_loss(rp, &fq, &fes, &ranks, alpha, 1.0, &mut g.data)?;
    Ok((loss, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankerTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for RerankerTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            batch_size: 16,
            epochs: 5,
            seed: 0,
        }
    }
}

/// One query's training item: the question and its labeled candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankItem {
    pub question: String,
    pub candidates: Vec<ExpansionCandidate>,
}

struct Prepared {
    fq: Features,
    fes: Vec<Features>,
    ranks: Vec<usize>,
}

/// Mini-batch AdamW on the mean per-query hinge loss. Queries whose candidates all
/// share one rank carry no pairs and are skipped.
pub fn train_reranker(
    rp: &RerankerParams,
    data: &[RerankItem],
    cfg: &RerankerTrainConfig,
) -> Result<(RerankerParams, Vec<f64>)> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("reranker training needs lr > 0 and batch size >= 1"));
    }
    let mut prepared = Vec::new();
    for item in data {
        let ranks = candidate_ranks(&item.candidates)?;
        if ranks.iter().all(|&r| r == ranks[0]) {
            continue;
        }
        prepared.push(Prepared {
            fq: rp.space.features(&item.question),
            fes: item.candidates.iter().map(|c| rp.space.features(&c.text)).collect(),
            ranks,
        });
    }
    if prepared.is_empty() {
        return Err(Error::invalid("no query has candidates with distinct ranks"));
    }
    let mut out = rp.clone();
    let mut params = vec![std::mem::replace(&mut out.w, Tensor::zeros("w", &[0]))];
    let mut opt = OptimizerState::new(AdamWConfig::with_lr(cfg.lr), &params);
    let mut trace = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "rerank-epoch", epoch as u64)));
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![Tensor::zeros("w", &params[0].shape)];
            let current = RerankerParams {
                space: rp.space.clone(),
                w: params[0].clone(),
                alpha: rp.alpha,
            };
            let mut loss = 0.0;
            for &k in batch {
                let p = &prepared[k];
                loss += scale * accumulate_rank_loss(&current, &p.fq, &p.fes, &p.ranks, rp.alpha, scale, &mut grad[0].data)?;
            }
            adamw_step(&mut opt, &mut params, &grad, Objective::Minimize)?;
            trace.push(loss);
        }
    }
    out.w = params.pop().expect("one tensor");
    Ok((out, trace))
}

/// Fraction of differently ranked candidate pairs whose scores are ordered like their ranks.
pub fn pairwise_agreement(rp: &RerankerParams, data: &[RerankItem]) -> Result<f64> {
    let (mut agree, mut total) = (0usize, 0usize);
    for item in data {
        let ranks = candidate_ranks(&item.candidates)?;
        let scores: Vec<f64> = item.candidates.iter().map(|c| reranker_score(rp, &item.question, &c.text)).collect();
        for i in 0..ranks.len() {
            for j in 0..ranks.len() {
                if ranks[i] < ranks[j] {
                    total += 1;
                    if scores[i] < scores[j] {
                        agree += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::invalid("no differently ranked pairs"));
    }
    Ok(agree as f64 / total as f64)
}

/// The lowest-scoring candidate; ties go to the lowest sample index.
pub fn filter_select<'a>(
    rp: &RerankerParams,
    question: &str,
    candidates: &'a [ExpansionCandidate],
) -> Result<&'a ExpansionCandidate> {
    let fq = rp.space.features(question);
    let mut best: Option<(f64, usize, &ExpansionCandidate)> = None;
    for c in candidates {
        let s = rp.bilinear(&fq, &rp.space.features(&c.text));
        let better = match best {
            None => true,
            Some((bs, bi, _)) => s < bs || (s == bs && c.sample_index < bi),
        };
        if better {
            best = Some((s, c.sample_index, c));
        }
    }
    best.map(|(_, _, c)| c).ok_or_else(|| Error::invalid("no candidates to select from"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::RankResult;
    use rand::Rng;

    fn space(ws: &[&str]) -> FeatureSpace {
        FeatureSpace::new(ws.iter().map(|s| s.to_string()).collect(), vec![1.0; ws.len()]).unwrap()
    }

    fn cand(i: usize, text: &str, rank: usize) -> ExpansionCandidate {
        ExpansionCandidate {
            query_id: "q".into(),
            text: text.into(),
            sample_index: i,
            rank: Some(RankResult::found(rank, 100)),
        }
    }

    #[test]
    fn zero_weights_score_zero() {
        let rp = RerankerParams::new(space(&["a", "b"]), 0.1).unwrap();
        assert_eq!(reranker_score(&rp, "a", "b a"), 0.0);
        assert_eq!(reranker_score(&rp, "zzz", ""), 0.0);
    }

    #[test]
    fn one_by_one_weight() {
        let fs = FeatureSpace::new(vec!["x".into()], vec![2.0]).unwrap();
        let mut rp = RerankerParams::new(fs, 0.1).unwrap();
        rp.w.data[0] = 3.0;
        // each side normalizes to the unit vector [1]
        assert_eq!(reranker_score(&rp, "x", "x x"), 3.0);
        assert_eq!(reranker_score(&rp, "x", "y"), 0.0);
    }

    #[test]
    fn features_are_unit_tfidf() {
        let fs = FeatureSpace::new(vec!["a".into(), "b".into()], vec![1.0, 2.0]).unwrap();
        let f = fs.features("a a b c");
        // tf-idf (2, 2) normalized
        let h = 0.5f64.sqrt();
        assert_eq!(f.len(), 2);
        assert!((f[0].1 - h).abs() < 1e-15 && (f[1].1 - h).abs() < 1e-15);
    }

    #[test]
    fn hinge_worked_example() {
        let (loss, dm) = hinge_from_scores(&[0.5, 0.2], &[1, 3], 0.1).unwrap();
        assert!((loss - 0.5).abs() < 1e-15);
        assert_eq!(dm, vec![1.0, -1.0]);
        let (loss, dm) = hinge_from_scores(&[-5.0, 0.2], &[1, 3], 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(dm, vec![0.0, 0.0]);
        assert!(hinge_from_scores(&[1.0, 2.0], &[4, 4], 0.1).is_err());
    }

    #[test]
    fn hinge_is_translation_invariant() {
        let s = [0.3, -0.1, 0.7, 0.0];
        let r = [2, 1, 9, 4];
        let shifted: Vec<f64> = s.iter().map(|v| v + 12.5).collect();
        let (a, _) = hinge_from_scores(&s, &r, 0.1).unwrap();
        let (b, _) = hinge_from_scores(&shifted, &r, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn rank_loss_gradient_matches_finite_differences() {
        let fs = FeatureSpace::new(
            ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
            vec![1.0, 1.5, 0.7, 2.0],
        )
        .unwrap();
        let mut rp = RerankerParams::new(fs, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in &mut rp.w.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        let cands = vec![cand(0, "a b", 1), cand(1, "c", 4), cand(2, "d a d", 2), cand(3, "b c d", 7)];
        let (_, g) = rank_loss(&rp, "a c", &cands, 0.1).unwrap();
        let h = 1e-6;
        for k in 0..rp.w.len() {
            let mut p = rp.clone();
            p.w.data[k] += h;
            let mut m = rp.clone();
            m.w.data[k] -= h;
            let fd = (rank_loss(&p, "a c", &cands, 0.1).unwrap().0 - rank_loss(&m, "a c", &cands, 0.1).unwrap().0)
                / (2.0 * h);
            let err = (fd - g.data[k]).abs() / fd.abs().max(g.data[k].abs()).max(1e-6);
            assert!(err < 1e-5, "w[{k}]: fd={fd} analytic={}", g.data[k]);
        }
    }

    fn toy_data() -> Vec<RerankItem> {
        // "good" expansions always outrank "bad" ones
        let mut data = Vec::new();
        for q in 0..12 {
            let question = format!("topic{}", q % 3);
            let mut cands = Vec::new();
            for i in 0..6 {
                let (text, rank) = if (i + q) % 2 == 0 { ("good word", 1) } else { ("bad word", 20) };
                cands.push(ExpansionCandidate {
                    query_id: format!("q{q}"),
                    ..cand(i, text, rank)
                });
            }
            data.push(RerankItem { question, candidates: cands });
        }
        data
    }

    fn toy_space() -> FeatureSpace {
        space(&["topic0", "topic1", "topic2", "good", "bad", "word"])
    }

    /// Pilot: agreement goes from 0 (all scores tie at zero weights) to 1.0.
    #[test]
    fn training_separates_toy_set() {
        let rp = RerankerParams::new(toy_space(), 0.1).unwrap();
        let data = toy_data();
        assert_eq!(pairwise_agreement(&rp, &data).unwrap(), 0.0);
        let cfg = RerankerTrainConfig {
            lr: 0.05,
            batch_size: 4,
            epochs: 10,
            seed: 1,
        };
        let (trained, trace) = train_reranker(&rp, &data, &cfg).unwrap();
        assert_eq!(trace.len(), 30);
        let after = pairwise_agreement(&trained, &data).unwrap();
        assert!(after > 0.9, "agreement {after}");
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let rp = RerankerParams::new(toy_space(), 0.1).unwrap();
        let cfg = RerankerTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(train_reranker(&rp, &toy_data(), &cfg).unwrap().0, rp);
        let cfg = RerankerTrainConfig::default();
        assert_eq!(
            train_reranker(&rp, &toy_data(), &cfg).unwrap(),
            train_reranker(&rp, &toy_data(), &cfg).unwrap()
        );
        let flat = vec![RerankItem {
            question: "x".into(),
            candidates: vec![cand(0, "a", 3), cand(1, "b", 3)],
        }];
        assert!(train_reranker(&rp, &flat, &cfg).is_err());
    }

    #[test]
    fn selection_rules() {
        let mut rp = RerankerParams::new(space(&["q", "a", "b", "c"]), 0.1).unwrap();
        let cands = vec![cand(0, "a", 1), cand(1, "b", 1), cand(2, "c", 1)];
        // w[q, c] lowest, so candidate 2 scores lowest
        rp.w.data[2] = 0.5;
        rp.w.data[3] = -0.7;
        rp.w.data[1] = 0.1;
        assert_eq!(filter_select(&rp, "q", &cands).unwrap().sample_index, 2);
        let one = &cands[..1];
        assert_eq!(filter_select(&rp, "q", one).unwrap(), &cands[0]);
        assert!(filter_select(&rp, "q", &[]).is_err());
        let mut rev = cands.clone();
        rev.reverse();
        assert_eq!(filter_select(&rp, "q", &rev).unwrap().sample_index, 2);
        // all-zero weights: every score ties, lowest index wins regardless of order
        let zero = RerankerParams::new(space(&["q", "a", "b", "c"]), 0.1).unwrap();
        assert_eq!(filter_select(&zero, "q", &rev).unwrap().sample_index, 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rp = RerankerParams::new(toy_space(), 0.25).unwrap();
        rp.w.data[7] = -1.5;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        let digest = rp.save(&path, json!({"seed": 3})).unwrap();
        let (back, prov) = RerankerParams::load(&path, Some(&digest)).unwrap();
        assert_eq!(back, rp);
        assert_eq!(prov["seed"], 3);
    }
}
