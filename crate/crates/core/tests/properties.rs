use std::collections::HashMap;

use proptest::prelude::*;

use aqe_core::data::{self, words, Document, QueryExample, Vocabulary};
use aqe_core::eval::{mean_pairwise_cosine, top_n_accuracy};
use aqe_core::expansion::ExpansionModel;
use aqe_core::retrieval::{InvertedIndex, RankResult};
use aqe_core::seqmodel::{init_model, ModelConfig};

const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];

fn corpus_strategy() -> impl Strategy<Value = Vec<Document>> {
    prop::collection::vec(prop::collection::vec(0..WORDS.len(), 1..12), 1..20).prop_map(|docs| {
        docs.into_iter()
            .enumerate()
            .map(|(i, ws)| Document {
                id: format!("d{i:02}"),
                text: ws.iter().map(|&w| WORDS[w]).collect::<Vec<_>>().join(" "),
            })
            .collect()
    })
}

fn query_strategy() -> impl Strategy<Value = String> {
    prop::collection::vec(0..WORDS.len() + 2, 1..6).prop_map(|ws| {
        ws.iter()
            .map(|&w| WORDS.get(w).copied().unwrap_or("unseen"))
            .collect::<Vec<_>>()
            .join(" ")
    })
}

/// Direct evaluation of the scoring formula from raw texts.
fn brute_bm25(docs: &[Document], query: &str, doc: usize, k1: f64, b: f64) -> f64 {
    let toks: Vec<Vec<String>> = docs.iter().map(|d| words(&d.text).collect()).collect();
    let n = docs.len() as f64;
    let avgdl = toks.iter().map(Vec::len).sum::<usize>() as f64 / n;
    let dl = toks[doc].len() as f64;
    let mut s = 0.0;
    for q in words(query) {
        let df = toks.iter().filter(|t| t.contains(&q)).count() as f64;
        let tf = toks[doc].iter().filter(|w| **w == q).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let idf = ((n - df + 0.5) / (df + 0.5) + 1.0).ln();
        s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bm25_matches_brute_force(docs in corpus_strategy(), q in query_strategy(), k1 in 0.1f64..3.0, b in 0.0f64..=1.0) {
        let idx = InvertedIndex::build(&docs, k1, b).unwrap();
        let toks = idx.tokenize(&q);
        for (i, d) in docs.iter().enumerate() {
            let got = idx.bm25_score(&toks, &d.id).unwrap();
            let want = brute_bm25(&docs, &q, i, k1, b);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-12), "{got} vs {want}");
        }
    }

    #[test]
    fn search_is_sorted_and_reproducible(docs in corpus_strategy(), q in query_strategy()) {
        let idx = InvertedIndex::build(&docs, 1.2, 0.75).unwrap();
        let a = idx.search(&q, 100);
        prop_assert_eq!(&a, &idx.search(&q, 100));
        for w in a.windows(2) {
            prop_assert!(w[0].score > w[1].score || (w[0].score == w[1].score && w[0].doc_id < w[1].doc_id));
        }
        prop_assert!(a.iter().all(|d| d.score > 0.0));
    }

    #[test]
    fn rank_of_gold_monotone_in_cutoff(docs in corpus_strategy(), q in query_strategy(), g in 0usize..20) {
        let idx = InvertedIndex::build(&docs, 1.2, 0.75).unwrap();
        let gold = vec![docs[g % docs.len()].id.clone()];
        let mut prev: Option<RankResult> = None;
        for cutoff in 1..=25 {
            let r = idx.rank_of_gold(&q, &gold, cutoff);
            prop_assert!(r.rank >= 1 && r.rank <= cutoff + 1);
            if let Some(p) = prev {
                if !p.is_sentinel() {
                    prop_assert_eq!(r.rank, p.rank);
                }
            }
            prev = Some(r);
        }
    }

    #[test]
    fn appending_documents_keeps_oracle_agreement(docs in corpus_strategy(), extra in corpus_strategy(), q in query_strategy()) {
        let mut all = docs.clone();
        all.extend(extra.into_iter().enumerate().map(|(i, d)| Document { id: format!("x{i:02}"), text: d.text }));
        let idx = InvertedIndex::build(&all, 1.2, 0.75).unwrap();
        let toks = idx.tokenize(&q);
        for (i, d) in all.iter().enumerate() {
            let want = brute_bm25(&all, &q, i, 1.2, 0.75);
            let got = idx.bm25_score(&toks, &d.id).unwrap();
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-12));
        }
    }

    #[test]
    fn index_bytes_round_trip(docs in corpus_strategy()) {
        let idx = InvertedIndex::build(&docs, 1.2, 0.75).unwrap();
        let bytes = idx.to_bytes().unwrap();
        let back = InvertedIndex::from_bytes(std::path::Path::new("mem"), &bytes).unwrap();
        prop_assert_eq!(&back, &idx);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn top_n_accuracy_is_monotone(ranks in prop::collection::vec(1usize..=101, 1..60)) {
        let rs: Vec<RankResult> = ranks
            .iter()
            .map(|&r| if r > 100 { RankResult::missed(100) } else { RankResult::found(r, 100) })
            .collect();
        let ns = [1, 2, 5, 10, 20, 50, 100];
        let acc = top_n_accuracy(&rs, &ns).unwrap();
        let vals: Vec<f64> = ns.iter().map(|n| acc[n]).collect();
        for w in vals.windows(2) {
            prop_assert!(w[0] <= w[1]);
        }
        prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mean_pairwise_cosine_is_bounded(vs in prop::collection::vec(prop::collection::btree_map(0usize..6, 0.01f64..5.0, 1..6), 2..6)) {
        let vecs: Vec<_> = vs
            .into_iter()
            .map(|m| m.into_iter().map(|(k, v)| (WORDS[k].to_string(), v)).collect())
            .collect();
        let d = mean_pairwise_cosine(&vecs).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&d));
        let same = vec![vecs[0].clone(); vecs.len()];
        prop_assert!((mean_pairwise_cosine(&same).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsonl_round_trip_is_byte_identical(texts in prop::collection::vec("[a-z][a-z \"\\\\é]{0,20}", 1..8)) {
        let dir = tempfile::tempdir().unwrap();
        let docs: Vec<Document> = texts.iter().enumerate().map(|(i, t)| Document { id: format!("d{i}"), text: t.clone() }).collect();
        let p = dir.path().join("c.jsonl");
        data::save_corpus(&p, &docs).unwrap();
        let back = data::load_corpus(&p).unwrap();
        prop_assert_eq!(&back, &docs);
        let q = dir.path().join("q.jsonl");
        let qs: Vec<QueryExample> = docs.iter().map(|d| QueryExample { id: format!("q-{}", d.id), question: d.text.clone(), gold_doc_ids: vec![d.id.clone()] }).collect();
        data::save_queries(&q, &qs).unwrap();
        let bytes = std::fs::read(&q).unwrap();
        data::save_queries(&q, &data::load_queries(&q, None).unwrap()).unwrap();
        prop_assert_eq!(std::fs::read(&q).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), layers in 1usize..3) {
        let tokens: Vec<String> = Vocabulary::SPECIALS.iter().map(|s| s.to_string()).chain(WORDS.iter().map(|s| s.to_string())).chain(["expand", "query"].map(String::from)).collect();
        let vocab = Vocabulary::from_tokens(tokens).unwrap();
        let mc = ModelConfig {
            vocab_size: vocab.len(),
            n_layers: layers,
            dim: 8,
            n_heads: 2,
            max_len: 16,
            seed,
            init_std: 0.1,
        };
        let m = ExpansionModel::new(init_model(&mc).unwrap(), vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let digest = m.save(&p, serde_json::json!({"seed": seed})).unwrap();
        let (back, prov) = ExpansionModel::load(&p, Some(&digest)).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(prov["seed"].as_u64(), Some(seed));
        let again = dir.path().join("n.ckpt");
        prop_assert_eq!(back.save(&again, serde_json::json!({"seed": seed})).unwrap(), digest);
    }
}

#[test]
fn vocab_word_counts_are_consistent() {
    let docs = vec![
        Document { id: "a".into(), text: "alpha beta beta".into() },
        Document { id: "b".into(), text: "beta gamma".into() },
    ];
    let idx = InvertedIndex::build(&docs, 1.2, 0.75).unwrap();
    let df: HashMap<&str, usize> = ["alpha", "beta", "gamma", "zeta"].iter().map(|w| (*w, idx.df_of_word(w))).collect();
    assert_eq!(df["alpha"], 1);
    assert_eq!(df["beta"], 2);
    assert_eq!(df["zeta"], 0);
}
