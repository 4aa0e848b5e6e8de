//! Python bindings: synthetic data, the BM25 index, expansion models, rerankers,
//! evaluation metrics and the end-to-end toy experiment.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use aqe_core::data::{Document, QueryExample};
use aqe_core::eval::Expander;
use aqe_core::expansion::{generate_candidates, ExpansionModel, GenerationConfig};
use aqe_core::filtering::{filter_select, reranker_score, RerankerParams};
use aqe_core::pipeline::{run_experiment, ExperimentConfig};
use aqe_core::retrieval::{InvertedIndex, RankResult};

fn err(e: aqe_core::Error) -> PyErr {
    match e {
        aqe_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn docs_from(pairs: Vec<(String, String)>) -> Vec<Document> {
    pairs.into_iter().map(|(id, text)| Document { id, text }).collect()
}

/// Synthetic corpus: `(docs, queries, background)` where docs are `(id, text)` pairs
/// and queries are `(id, question, gold_doc_ids)` triples.
#[pyfunction]
#[pyo3(signature = (n_docs, n_queries, mismatch_rate, seed))]
#[allow(clippy::type_complexity)]
fn gen_synthetic(
    n_docs: usize,
    n_queries: usize,
    mismatch_rate: f64,
    seed: u64,
) -> PyResult<(Vec<(String, String)>, Vec<(String, String, Vec<String>)>, Vec<(String, String)>)> {
    let ds = aqe_core::data::gen_synthetic(n_docs, n_queries, mismatch_rate, seed).map_err(err)?;
    let d = |v: Vec<Document>| v.into_iter().map(|d| (d.id, d.text)).collect();
    let queries = ds
        .queries
        .into_iter()
        .map(|q| (q.id, q.question, q.gold_doc_ids))
        .collect();
    Ok((d(ds.docs), queries, d(ds.background)))
}

/// BM25 inverted index.
#[pyclass(name = "Index", frozen)]
struct PyIndex {
    inner: InvertedIndex,
}

#[pymethods]
impl PyIndex {
    #[new]
    #[pyo3(signature = (docs, k1 = aqe_core::retrieval::DEFAULT_K1, b = aqe_core::retrieval::DEFAULT_B))]
    fn new(docs: Vec<(String, String)>, k1: f64, b: f64) -> PyResult<Self> {
        let inner = InvertedIndex::build(&docs_from(docs), k1, b).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: InvertedIndex::load(&path).map_err(err)?,
        })
    }

    /// Writes the index and returns its sha256.
    fn save(&self, path: PathBuf) -> PyResult<String> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn num_docs(&self) -> usize {
        self.inner.num_docs()
    }

    #[getter]
    fn avgdl(&self) -> f64 {
        self.inner.avgdl()
    }

    fn bm25_score(&self, query: &str, doc_id: &str) -> PyResult<f64> {
        self.inner.bm25_score(&self.inner.tokenize(query), doc_id).map_err(err)
    }

    /// `[(doc_id, score)]`, best first.
    #[pyo3(signature = (query, top_n = 10))]
    fn search(&self, query: &str, top_n: usize) -> Vec<(String, f64)> {
        self.inner
            .search(query, top_n)
            .into_iter()
            .map(|s| (s.doc_id, s.score))
            .collect()
    }

    /// 1-based rank of the first gold document, or `cutoff + 1`.
    #[pyo3(signature = (query, gold_doc_ids, cutoff = aqe_core::retrieval::DEFAULT_CUTOFF))]
    fn rank_of_gold(&self, query: &str, gold_doc_ids: Vec<String>, cutoff: usize) -> usize {
        self.inner.rank_of_gold(query, &gold_doc_ids, cutoff).rank
    }
}

/// Expansion model checkpoint.
#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ExpansionModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ExpansionModel::load(&path, None).map_err(err)?.0,
        })
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_params()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    fn digest(&self) -> String {
        self.inner.params.digest()
    }

    /// Greedy expansion of one question.
    #[pyo3(signature = (question, max_new = aqe_core::expansion::MAX_NEW_TOKENS))]
    fn greedy(&self, question: &str, max_new: usize) -> PyResult<String> {
        Ok(self.inner.greedy(question, max_new).map_err(err)?.0)
    }

    /// `n` sampled expansions.
    #[pyo3(signature = (question, n = 50, temperature = 1.0, top_k = 50, seed = 0))]
    fn sample(&self, question: &str, n: usize, temperature: f64, top_k: usize, seed: u64) -> PyResult<Vec<String>> {
        let cfg = GenerationConfig {
            n,
            temperature,
            top_k,
            ..GenerationConfig::default()
        };
        let (cands, _) = generate_candidates(&self.inner, "q", question, &cfg, seed).map_err(err)?;
        Ok(cands.into_iter().map(|c| c.text).collect())
    }

    /// `log P(expansion + EOS | prompt(question))`.
    fn log_prob(&self, question: &str, expansion: &str) -> PyResult<f64> {
        let prompt = self.inner.prompt_tokens(question).map_err(err)?;
        let target = self.inner.target_tokens(expansion);
        aqe_core::seqmodel::log_prob(&self.inner.params, &prompt, &target).map_err(err)
    }
}

/// Bilinear reranker of the generate-then-filter baseline.
#[pyclass(name = "Reranker", frozen)]
struct PyReranker {
    inner: RerankerParams,
}

#[pymethods]
impl PyReranker {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RerankerParams::load(&path, None).map_err(err)?.0,
        })
    }

    /// Lower is better.
    fn score(&self, question: &str, expansion: &str) -> f64 {
        reranker_score(&self.inner, question, expansion)
    }

    /// Samples `n` expansions from `model` and keeps the lowest-scoring one.
    #[pyo3(signature = (model, question, n = 50, seed = 0))]
    fn select(&self, model: &PyModel, question: &str, n: usize, seed: u64) -> PyResult<String> {
        let cfg = GenerationConfig {
            n,
            ..GenerationConfig::default()
        };
        let (cands, _) = generate_candidates(&model.inner, "q", question, &cfg, seed).map_err(err)?;
        Ok(filter_select(&self.inner, question, &cands).map_err(err)?.text.clone())
    }
}

/// Top-N accuracy as fractions of gold ranks (`cutoff + 1` meaning not retrieved).
#[pyfunction]
#[pyo3(signature = (ranks, ns, cutoff = aqe_core::retrieval::DEFAULT_CUTOFF))]
fn top_n_accuracy(ranks: Vec<usize>, ns: Vec<usize>, cutoff: usize) -> PyResult<BTreeMap<usize, f64>> {
    let rs: Vec<RankResult> = ranks.into_iter().map(|rank| RankResult { rank, cutoff }).collect();
    aqe_core::eval::top_n_accuracy(&rs, &ns).map_err(err)
}

/// Mean pairwise tf-idf cosine of the expansions (idf from `index`).
#[pyfunction]
fn diversity(expansions: Vec<String>, index: &PyIndex) -> PyResult<f64> {
    aqe_core::eval::diversity(&expansions, &index.inner).map_err(err)
}

/// Two-sided paired t-test: `{"t", "df", "p_value", "mean_diff", "identical"}`.
#[pyfunction]
fn paired_t_test<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let t = aqe_core::eval::paired_t_test(&a, &b).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("n", t.n)?;
    d.set_item("t", t.t)?;
    d.set_item("df", t.df)?;
    d.set_item("p_value", t.p_value)?;
    d.set_item("mean_diff", t.mean_diff)?;
    d.set_item("identical", t.identical)?;
    Ok(d)
}

/// Top-N accuracy of identity (no model) or greedy expansion on `queries` (`(id, question, gold_ids)` triples).
#[pyfunction]
#[pyo3(signature = (index, queries, model = None, ns = vec![1, 5, 10, 20, 50, 100], cutoff = aqe_core::retrieval::DEFAULT_CUTOFF))]
fn evaluate(
    index: &PyIndex,
    queries: Vec<(String, String, Vec<String>)>,
    model: Option<&PyModel>,
    ns: Vec<usize>,
    cutoff: usize,
) -> PyResult<BTreeMap<usize, f64>> {
    let qs: Vec<QueryExample> = queries
        .into_iter()
        .map(|(id, question, gold_doc_ids)| QueryExample {
            id,
            question,
            gold_doc_ids,
        })
        .collect();
    let e = match model {
        Some(m) => Expander::Aligned(&m.inner),
        None => Expander::Identity,
    };
    let (r, _) = aqe_core::eval::evaluate(&index.inner, &qs, &e, &ns, cutoff).map_err(err)?;
    Ok(r.accuracy)
}

/// Runs the whole synthetic experiment; returns `{method: {N: accuracy fraction}}`.
///
/// Keyword overrides: n_docs, n_train, n_test, lr, epochs, dpo_lr, dpo_epochs, n,
/// pretrain_epochs, dim.
#[pyfunction]
#[pyo3(signature = (seed = 7, **overrides))]
fn run_toy_experiment(
    seed: u64,
    overrides: Option<&Bound<'_, PyDict>>,
) -> PyResult<BTreeMap<String, BTreeMap<usize, f64>>> {
    let mut cfg = ExperimentConfig::toy(seed);
    if let Some(o) = overrides {
        for (k, v) in o.iter() {
            let key: String = k.extract()?;
            match key.as_str() {
                "n_docs" => cfg.n_docs = v.extract()?,
                "n_train" => cfg.n_train = v.extract()?,
                "n_test" => cfg.n_test = v.extract()?,
                "lr" => cfg.lr = v.extract()?,
                "epochs" => cfg.epochs = v.extract()?,
                "dpo_lr" => cfg.dpo_lr = Some(v.extract()?),
                "dpo_epochs" => cfg.dpo_epochs = Some(v.extract()?),
                "n" => cfg.generation.n = v.extract()?,
                "pretrain_epochs" => cfg.pretrain.epochs = v.extract()?,
                "dim" => cfg.dim = v.extract()?,
                other => return Err(PyValueError::new_err(format!("unknown override {other:?}"))),
            }
        }
    }
    let res = run_experiment(&cfg).map_err(err)?;
    Ok(res.reports.into_iter().map(|(k, r)| (k, r.accuracy)).collect())
}

#[pymodule]
fn aqe(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyIndex>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyReranker>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(top_n_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(diversity, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_toy_experiment, m)?)?;
    Ok(())
}
