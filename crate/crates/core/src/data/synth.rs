//! Synthetic retrieval data with a controllable vocabulary gap.
//!
//! Every document holds three "concept" words plus filler words. A query names
//! the three concepts of its gold document. A mismatched query replaces every
//! concept word with a synonym that never occurs in the corpus, so raw BM25
//! cannot find the gold document; appending the canonical concept words recovers it.
//!
//! A separate background collection, never indexed, pairs each synonym with its
//! canonical word. It is pretraining text from which a model can pick up the
//! relation without ever seeing a query.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Document, QueryExample};
use crate::error::{Error, Result};

/// Question words; none of them ever appears in a synthetic document.
pub const SYNTH_TEMPLATE_WORDS: [&str; 5] = ["what", "which", "who", "where", "how"];

const CONCEPTS_PER_DOC: usize = 3;
const FILLERS_PER_DOC: usize = 4;
const PAIRS_PER_BACKGROUND_DOC: usize = 3;
const ONSETS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub docs: Vec<Document>,
    pub queries: Vec<QueryExample>,
    /// Pretraining-only text, `n_docs` documents, each holding three (canonical, synonym) pairs.
    pub background: Vec<Document>,
    /// (canonical, synonym) per concept.
    pub synonyms: Vec<(String, String)>,
    /// Per query, whether its concept words were replaced by synonyms.
    pub mismatched: Vec<bool>,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        w.push(ONSETS[rng.gen_range(0..ONSETS.len())] as char);
        w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
    }
    w
}

fn choose3(n: usize) -> usize {
    n * n.saturating_sub(1) * n.saturating_sub(2) / 6
}

/// Generates `n_docs` documents and `n_queries` queries with distinct gold documents.
///
/// Each query is mismatched independently with probability `mismatch_rate`.
/// Output is a pure function of the arguments.
pub fn gen_synthetic(n_docs: usize, n_queries: usize, mismatch_rate: f64, seed: u64) -> Result<SyntheticDataset> {
    if n_queries == 0 || n_docs < n_queries {
        return Err(Error::invalid(format!(
            "need n_docs >= n_queries >= 1 (got {n_docs} docs, {n_queries} queries)"
        )));
    }
    if !(0.0..=1.0).contains(&mismatch_rate) {
        return Err(Error::invalid(format!("mismatch_rate {mismatch_rate} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut n_concepts = 12;
    while choose3(n_concepts) < 4 * n_docs {
        n_concepts += 1;
    }
    let n_fillers = n_concepts;

    let reserved: HashSet<&str> = SYNTH_TEMPLATE_WORDS
        .iter()
        .copied()
        .chain(crate::expansion::PROMPT_SUFFIX.split(|c: char| !c.is_alphanumeric()))
        .collect();
    let mut used: HashSet<String> = HashSet::new();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if !reserved.contains(w.as_str()) && used.insert(w.clone()) {
            break w;
        }
    };
    let canonical: Vec<String> = (0..n_concepts).map(|_| fresh(&mut rng)).collect();
    let synonym: Vec<String> = (0..n_concepts).map(|_| fresh(&mut rng)).collect();
    let fillers: Vec<String> = (0..n_fillers).map(|_| fresh(&mut rng)).collect();

    let mut triples: HashSet<[usize; 3]> = HashSet::new();
    let mut doc_concepts = Vec::with_capacity(n_docs);
    let mut docs = Vec::with_capacity(n_docs);
    let width = n_docs.to_string().len().max(4);
    let concept_ids: Vec<usize> = (0..n_concepts).collect();
    while docs.len() < n_docs {
        let mut pick: Vec<usize> = concept_ids
            .choose_multiple(&mut rng, CONCEPTS_PER_DOC)
            .copied()
            .collect();
        pick.sort_unstable();
        let key = [pick[0], pick[1], pick[2]];
        if !triples.insert(key) {
            continue;
        }
        let mut words: Vec<&str> = pick.iter().map(|&c| canonical[c].as_str()).collect();
        words.extend(
            fillers
                .choose_multiple(&mut rng, FILLERS_PER_DOC)
                .map(String::as_str),
        );
        words.shuffle(&mut rng);
        docs.push(Document {
            id: format!("d{:0width$}", docs.len()),
            text: words.join(" "),
        });
        doc_concepts.push(key);
    }

    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut rng);
    let qwidth = n_queries.to_string().len().max(4);
    let mut queries = Vec::with_capacity(n_queries);
    let mut mismatched = Vec::with_capacity(n_queries);
    for (j, &d) in order.iter().take(n_queries).enumerate() {
        let swap = rng.gen::<f64>() < mismatch_rate;
        let table = if swap { &synonym } else { &canonical };
        let mut terms: Vec<&str> = doc_concepts[d].iter().map(|&c| table[c].as_str()).collect();
        terms.shuffle(&mut rng);
        let wh = SYNTH_TEMPLATE_WORDS[rng.gen_range(0..SYNTH_TEMPLATE_WORDS.len())];
        queries.push(QueryExample {
            id: format!("q{:0qwidth$}", j),
            question: format!("{wh} {}", terms.join(" ")),
            gold_doc_ids: vec![docs[d].id.clone()],
        });
        mismatched.push(swap);
    }

    let n_background = n_docs;
    let bwidth = n_background.to_string().len().max(4);
    let mut background = Vec::with_capacity(n_background);
    for i in 0..n_background {
        let mut words: Vec<&str> = Vec::new();
        for &c in concept_ids.choose_multiple(&mut rng, PAIRS_PER_BACKGROUND_DOC) {
            words.push(&canonical[c]);
            words.push(&synonym[c]);
        }
        words.shuffle(&mut rng);
        background.push(Document {
            id: format!("b{i:0bwidth$}"),
            text: words.join(" "),
        });
    }

    Ok(SyntheticDataset {
        docs,
        queries,
        background,
        synonyms: canonical.into_iter().zip(synonym).collect(),
        mismatched,
    })
}
