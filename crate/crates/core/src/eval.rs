//! Top-N accuracy, evaluation drivers, expansion diversity, paired significance tests
//! and the single-shot versus generate-and-filter latency benchmark.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::QueryExample;
use crate::error::{Error, Result};
use crate::expansion::{expanded_query, generate_candidates, ExpansionModel, GenerationConfig, MAX_NEW_TOKENS};
use crate::filtering::{filter_select, RerankerParams};
use crate::retrieval::{InvertedIndex, RankResult};

pub const DEFAULT_TOPN: [usize; 6] = [1, 5, 10, 20, 50, 100];
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Fraction of queries whose gold rank is within each N. Sentinel ranks never count.
pub fn top_n_accuracy(ranks: &[RankResult], ns: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if ranks.is_empty() {
        return Err(Error::invalid("no ranks to score"));
    }
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
        return Err(Error::invalid("top-N list must be non-empty, positive and strictly ascending"));
    }
    let total = ranks.len() as f64;
    Ok(ns
        .iter()
        .map(|&n| (n, ranks.iter().filter(|r| r.hit_at(n)).count() as f64 / total))
        .collect())
}

/// How each query's retrieval text is produced.
#[derive(Debug, Clone, Copy)]
pub enum Expander<'a> {
    /// The raw question.
    Identity,
    /// Greedy expansion from the unaligned base model.
    ZeroShot(&'a ExpansionModel),
    /// Greedy expansion from an aligned checkpoint.
    Aligned(&'a ExpansionModel),
    /// `n` sampled expansions, one kept by the reranker.
    Filtering {
        model: &'a ExpansionModel,
        reranker: &'a RerankerParams,
        generation: GenerationConfig,
        seed: u64,
    },
}

impl Expander<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Expander::Identity => "identity",
            Expander::ZeroShot(_) => "zero-shot",
            Expander::Aligned(_) => "aligned",
            Expander::Filtering { .. } => "filtering",
        }
    }

    /// Expansion text for one query and the model forward passes it took.
    pub fn expand(&self, query_id: &str, question: &str) -> Result<(String, usize)> {
        match *self {
            Expander::Identity => Ok((String::new(), 0)),
            Expander::ZeroShot(m) | Expander::Aligned(m) => m.greedy(question, MAX_NEW_TOKENS),
            Expander::Filtering {
                model,
                reranker,
                generation,
                seed,
            } => {
                let (cands, passes) = generate_candidates(model, query_id, question, &generation, seed)?;
                Ok((filter_select(reranker, question, &cands)?.text.clone(), passes))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub expansion: String,
    pub rank: usize,
    pub forward_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub expander: String,
    pub n_queries: usize,
    pub cutoff: usize,
    pub accuracy: BTreeMap<usize, f64>,
    /// Mean pairwise tf-idf cosine over the run's expansions; absent for the identity expander.
    pub diversity: Option<f64>,
    pub forward_passes: usize,
    pub per_query: Vec<QueryOutcome>,
}

impl EvalReport {
    pub fn ranks(&self) -> Vec<RankResult> {
        self.per_query
            .iter()
            .map(|q| RankResult {
                rank: q.rank,
                cutoff: self.cutoff,
            })
            .collect()
    }

    /// 0/1 hit indicators at `n`, in query order.
    pub fn hits(&self, n: usize) -> Vec<f64> {
        self.ranks().iter().map(|r| if r.hit_at(n) { 1.0 } else { 0.0 }).collect()
    }
}

/// Wall-clock measurements kept apart from the deterministic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub per_query_seconds: Vec<f64>,
}

/// Expands and retrieves every query (in parallel; results stay in query order).
pub fn evaluate(
    index: &InvertedIndex,
    queries: &[QueryExample],
    expander: &Expander<'_>,
    ns: &[usize],
    cutoff: usize,
) -> Result<(EvalReport, Timing)> {
    if queries.is_empty() {
        return Err(Error::invalid("no queries to evaluate"));
    }
    let start = Instant::now();
    let rows: Vec<(QueryOutcome, f64)> = queries
        .par_iter()
        .map(|q| {
            let t0 = Instant::now();
            let (expansion, passes) = expander.expand(&q.id, &q.question)?;
            let rank = index.rank_of_gold(&expanded_query(&q.question, &expansion), &q.gold_doc_ids, cutoff);
            Ok((
                QueryOutcome {
                    query_id: q.id.clone(),
                    expansion,
                    rank: rank.rank,
                    forward_passes: passes,
                },
                t0.elapsed().as_secs_f64(),
            ))
        })
        .collect::<Result<_>>()?;
    let total_seconds = start.elapsed().as_secs_f64();
    let (per_query, per_query_seconds): (Vec<QueryOutcome>, Vec<f64>) = rows.into_iter().unzip();
    let cutoff = cutoff.max(1);
    let ranks: Vec<RankResult> = per_query
        .iter()
        .map(|o| RankResult { rank: o.rank, cutoff })
        .collect();
    let diversity = match expander {
        Expander::Identity => None,
        _ if per_query.len() < 2 => None,
        _ => {
            let texts: Vec<String> = per_query.iter().map(|o| o.expansion.clone()).collect();
            Some(diversity(&texts, index)?)
        }
    };
    let report = EvalReport {
        expander: expander.name().to_string(),
        n_queries: per_query.len(),
        cutoff,
        accuracy: top_n_accuracy(&ranks, ns)?,
        diversity,
        forward_passes: per_query.iter().map(|o| o.forward_passes).sum(),
        per_query,
    };
    Ok((
        report,
        Timing {
            total_seconds,
            per_query_seconds,
        },
    ))
}

/// Cosine similarity of sparse vectors; 0 when either is the zero vector.
pub fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(k, v)| b.get(k).map(|w| v * w)).sum();
    dot / (na * nb)
}

/// Mean pairwise cosine over all unordered pairs.
pub fn mean_pairwise_cosine(vectors: &[BTreeMap<String, f64>]) -> Result<f64> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::invalid("diversity needs at least two expansions"));
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += cosine(&vectors[i], &vectors[j]);
        }
    }
    Ok(2.0 * sum / (n * (n - 1)) as f64)
}

/// Diversity score D of a set of expansions: mean pairwise cosine of their tf-idf
/// vectors under the index's idf. Higher means more similar.
pub fn diversity(expansions: &[String], index: &InvertedIndex) -> Result<f64> {
    let vectors: Vec<_> = expansions.iter().map(|e| index.tfidf(e)).collect();
    mean_pairwise_cosine(&vectors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    /// Absent when the differences have zero variance.
    pub t: Option<f64>,
    pub df: usize,
    pub p_value: f64,
    /// Every difference is zero.
    pub identical: bool,
}

/// Two-sided p-value of a Student t statistic.
pub fn two_sided_p(t: f64, df: usize) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Paired two-sided t-test on `a - b`. Zero-variance differences get p = 1 when their
/// mean is zero and p = 0 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two observations"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(PairedTest {
            n,
            mean_diff: mean,
            t: None,
            df,
            p_value: if mean == 0.0 { 1.0 } else { 0.0 },
            identical: mean == 0.0,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t: Some(t),
        df,
        p_value: two_sided_p(t, df),
        identical: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub top_n: usize,
    /// Accuracy of A minus accuracy of B.
    pub delta: f64,
    pub test: PairedTest,
    pub p_adjusted: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub a: String,
    pub b: String,
    /// Number of comparisons in the Bonferroni family.
    pub family_size: usize,
    pub level: f64,
    pub rows: Vec<ComparisonRow>,
}

/// Paired tests of per-query hits at every N. `family_size` is the Bonferroni factor;
/// by default the number of N values compared here.
pub fn paired_compare(
    a_name: &str,
    a_hits: &BTreeMap<usize, Vec<f64>>,
    b_name: &str,
    b_hits: &BTreeMap<usize, Vec<f64>>,
    family_size: Option<usize>,
) -> Result<ComparisonResult> {
    if a_hits.keys().ne(b_hits.keys()) {
        return Err(Error::invalid("runs were scored at different N values"));
    }
    let m = family_size.unwrap_or(a_hits.len()).max(1);
    let rows = a_hits
        .iter()
        .map(|(&n, a)| {
            let b = &b_hits[&n];
            let test = paired_t_test(a, b)?;
            let p_adjusted = (test.p_value * m as f64).min(1.0);
            Ok(ComparisonRow {
                top_n: n,
                delta: test.mean_diff,
                test,
                p_adjusted,
                significant: !test.identical && p_adjusted < SIGNIFICANCE_LEVEL,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonResult {
        a: a_name.to_string(),
        b: b_name.to_string(),
        family_size: m,
        level: SIGNIFICANCE_LEVEL,
        rows,
    })
}

fn check_same_queries(a: &EvalReport, b: &EvalReport) -> Result<()> {
    let ids = |r: &EvalReport| r.per_query.iter().map(|q| q.query_id.clone()).collect::<Vec<_>>();
    if ids(a) != ids(b) {
        return Err(Error::invalid(format!(
            "runs {} and {} cover different query sets",
            a.expander, b.expander
        )));
    }
    Ok(())
}

/// Compares every run against `runs[baseline]`. The Bonferroni family is every
/// (run pair, N) test performed here.
pub fn compare_runs(runs: &[(String, EvalReport)], baseline: usize, ns: &[usize]) -> Result<Vec<ComparisonResult>> {
    if runs.len() < 2 || baseline >= runs.len() {
        return Err(Error::invalid("need a baseline and at least one other run"));
    }
    let family = (runs.len() - 1) * ns.len();
    let (base_name, base) = &runs[baseline];
    let hits = |r: &EvalReport| ns.iter().map(|&n| (n, r.hits(n))).collect::<BTreeMap<_, _>>();
    let base_hits = hits(base);
    runs.iter()
        .enumerate()
        .filter(|&(i, _)| i != baseline)
        .map(|(_, (name, r))| {
            check_same_queries(r, base)?;
            paired_compare(name, &hits(r), base_name, &base_hits, Some(family))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_queries: usize,
    pub n: usize,
    pub repetitions: usize,
    /// Forward passes per query for single-shot greedy expansion.
    pub aligned_passes: Vec<usize>,
    /// Forward passes per query for generating the `n` candidates.
    pub filtering_passes: Vec<usize>,
    /// Reranker evaluations per query.
    pub scorer_evals: Vec<usize>,
    pub aligned_median_seconds: f64,
    pub filtering_median_seconds: f64,
    /// aligned / filtering median wall-clock per query.
    pub time_ratio: f64,
    /// total aligned passes / total filtering passes.
    pub pass_ratio: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times both pipelines (expansion plus retrieval) on the calling thread. Each
/// repetition yields a mean per-query time; the medians over repetitions are reported.
pub fn bench_latency(
    index: &InvertedIndex,
    queries: &[QueryExample],
    aligned: &ExpansionModel,
    filtering: (&ExpansionModel, &RerankerParams),
    generation: &GenerationConfig,
    seed: u64,
    cutoff: usize,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::invalid("benchmark needs at least 3 repetitions"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("no queries to benchmark"));
    }
    let single = Expander::Aligned(aligned);
    let multi = Expander::Filtering {
        model: filtering.0,
        reranker: filtering.1,
        generation: *generation,
        seed,
    };
    let run = |e: &Expander<'_>| -> Result<(Vec<usize>, f64)> {
        let start = Instant::now();
        let mut passes = Vec::with_capacity(queries.len());
        for q in queries {
            let (text, p) = e.expand(&q.id, &q.question)?;
            index.rank_of_gold(&expanded_query(&q.question, &text), &q.gold_doc_ids, cutoff);
            passes.push(p);
        }
        Ok((passes, start.elapsed().as_secs_f64() / queries.len() as f64))
    };
    let mut a_times = Vec::new();
    let mut f_times = Vec::new();
    let mut a_passes = Vec::new();
    let mut f_passes = Vec::new();
    for _ in 0..repetitions {
        let (p, t) = run(&single)?;
        a_passes = p;
        a_times.push(t);
        let (p, t) = run(&multi)?;
        f_passes = p;
        f_times.push(t);
    }
    let a_med = median(&mut a_times);
    let f_med = median(&mut f_times);
    let a_total: usize = a_passes.iter().sum();
    let f_total: usize = f_passes.iter().sum();
    Ok(BenchReport {
        n_queries: queries.len(),
        n: generation.n,
        repetitions,
        aligned_passes: a_passes,
        filtering_passes: f_passes,
        scorer_evals: vec![generation.n; queries.len()],
        aligned_median_seconds: a_med,
        filtering_median_seconds: f_med,
        time_ratio: a_med / f_med,
        pass_ratio: a_total as f64 / f_total.max(1) as f64,
    })
}
