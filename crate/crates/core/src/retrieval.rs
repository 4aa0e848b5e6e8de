//! BM25 inverted index, top-N search and gold-document rank.
//!
//! Scoring uses the Robertson form with a non-negative idf:
//!
//! ```text
//! idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! score(q, d) = sum over query tokens t of idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * dl / avgdl))
//! ```
//!
//! A repeated query token contributes once per occurrence.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{build_vocab, tokenize, words, Document, TokenId, TokenSeq, Vocabulary};
use crate::error::{Error, Result};
use crate::persist;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
pub const DEFAULT_CUTOFF: usize = 100;

const INDEX_MAGIC: &[u8; 8] = b"AQEINDX\0";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    k1: f64,
    b: f64,
    vocab: Vocabulary,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avgdl: f64,
    /// Indexed by term id; each list sorted by document position.
    postings: Vec<Vec<Posting>>,
    doc_pos: HashMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// 1-based rank of the first gold document, or `cutoff + 1` when none was retrieved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankResult {
    pub rank: usize,
    pub cutoff: usize,
}

impl RankResult {
    pub fn found(rank: usize, cutoff: usize) -> Self {
        debug_assert!(rank >= 1 && rank <= cutoff);
        Self { rank, cutoff }
    }

    pub fn missed(cutoff: usize) -> Self {
        Self {
            rank: cutoff + 1,
            cutoff,
        }
    }

    pub fn is_sentinel(&self) -> bool {
        self.rank > self.cutoff
    }

    /// Whether the gold document sits within the first `n` results.
    pub fn hit_at(&self, n: usize) -> bool {
        !self.is_sentinel() && self.rank <= n
    }
}

impl InvertedIndex {
    /// Indexes `corpus`. The index keeps its own vocabulary over the corpus words.
    pub fn build(corpus: &[Document], k1: f64, b: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot index an empty corpus"));
        }
        if !(k1 > 0.0 && k1.is_finite()) || !(0.0..=1.0).contains(&b) {
            return Err(Error::invalid(format!("BM25 parameters out of range: k1={k1}, b={b}")));
        }
        let vocab = build_vocab(corpus, &[], 1)?;
        let mut postings: Vec<Vec<Posting>> = vec![Vec::new(); vocab.len()];
        let mut doc_ids = Vec::with_capacity(corpus.len());
        let mut doc_lens = Vec::with_capacity(corpus.len());
        let mut doc_pos = HashMap::with_capacity(corpus.len());
        for (pos, doc) in corpus.iter().enumerate() {
            let toks = tokenize(&doc.text, &vocab);
            if toks.is_empty() {
                return Err(Error::invalid(format!("document {:?} has no indexable text", doc.id)));
            }
            if doc_pos.insert(doc.id.clone(), pos as u32).is_some() {
                return Err(Error::DuplicateId(doc.id.clone()));
            }
            let mut tf: HashMap<TokenId, u32> = HashMap::new();
            for &t in &toks.ids {
                *tf.entry(t).or_default() += 1;
            }
            let mut terms: Vec<(TokenId, u32)> = tf.into_iter().collect();
            terms.sort_unstable();
            for (t, f) in terms {
                postings[t as usize].push(Posting { doc: pos as u32, tf: f });
            }
            doc_ids.push(doc.id.clone());
            doc_lens.push(toks.len() as u32);
        }
        let avgdl = doc_lens.iter().map(|&l| l as f64).sum::<f64>() / doc_lens.len() as f64;
        Ok(Self {
            k1,
            b,
            vocab,
            doc_ids,
            doc_lens,
            avgdl,
            postings,
            doc_pos,
        })
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.doc_pos.get(doc_id).map(|&p| self.doc_lens[p as usize])
    }

    pub fn postings(&self, term: TokenId) -> &[Posting] {
        self.postings.get(term as usize).map_or(&[], Vec::as_slice)
    }

    /// Document frequency of a word (0 when the corpus never contains it).
    pub fn df_of_word(&self, word: &str) -> usize {
        self.vocab.id(word).map_or(0, |t| self.postings(t).len())
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        tokenize(text, &self.vocab)
    }

    pub fn idf_for_df(&self, df: usize) -> f64 {
        let n = self.num_docs() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn idf(&self, term: TokenId) -> f64 {
        self.idf_for_df(self.postings(term).len())
    }

    /// Idf of a word; words absent from the corpus get the df = 0 value.
    pub fn idf_of_word(&self, word: &str) -> f64 {
        self.idf_for_df(self.df_of_word(word))
    }

    /// Unnormalized tf-idf weights of the words of `text`.
    pub fn tfidf(&self, text: &str) -> BTreeMap<String, f64> {
        let mut tf: BTreeMap<String, f64> = BTreeMap::new();
        for w in words(text) {
            *tf.entry(w).or_insert(0.0) += 1.0;
        }
        for (w, v) in tf.iter_mut() {
            *v *= self.idf_of_word(w);
        }
        tf
    }

    fn term_weight(&self, idf: f64, tf: u32, dl: u32) -> f64 {
        let tf = tf as f64;
        let norm = self.k1 * (1.0 - self.b + self.b * dl as f64 / self.avgdl);
        idf * tf * (self.k1 + 1.0) / (tf + norm)
    }

    /// BM25 score of one document for tokens produced by this index's vocabulary.
    pub fn bm25_score(&self, query: &TokenSeq, doc_id: &str) -> Result<f64> {
        self.check_vocab(query)?;
        let pos = *self
            .doc_pos
            .get(doc_id)
            .ok_or_else(|| Error::UnknownDoc(doc_id.to_string()))?;
        let dl = self.doc_lens[pos as usize];
        let mut score = 0.0;
        for &t in &query.ids {
            let plist = self.postings(t);
            if let Ok(i) = plist.binary_search_by_key(&pos, |p| p.doc) {
                score += self.term_weight(self.idf(t), plist[i].tf, dl);
            }
        }
        Ok(score)
    }

    fn check_vocab(&self, query: &TokenSeq) -> Result<()> {
        if query.vocab != self.vocab.fingerprint() {
            return Err(Error::invalid("query tokens come from a different vocabulary than the index"));
        }
        Ok(())
    }

    /// Scores of every document with a positive score, in document order.
    fn accumulate(&self, query: &TokenSeq) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_docs()];
        for &t in &query.ids {
            let plist = self.postings(t);
            if plist.is_empty() {
                continue;
            }
            let idf = self.idf(t);
            for p in plist {
                scores[p.doc as usize] += self.term_weight(idf, p.tf, self.doc_lens[p.doc as usize]);
            }
        }
        scores
    }

    /// Top `top_n` documents by descending score, ties by ascending doc id.
    /// Documents scoring zero are never returned.
    pub fn search(&self, query_text: &str, top_n: usize) -> Vec<ScoredDoc> {
        self.search_tokens(&self.tokenize(query_text), top_n)
    }

    pub fn search_tokens(&self, query: &TokenSeq, top_n: usize) -> Vec<ScoredDoc> {
        if top_n == 0 || self.check_vocab(query).is_err() {
            return Vec::new();
        }
        let scores = self.accumulate(query);
        let mut hits: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(_, s)| s > 0.0)
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.doc_ids[a.0].cmp(&self.doc_ids[b.0]))
        };
        if hits.len() > top_n {
            hits.select_nth_unstable_by(top_n - 1, cmp);
            hits.truncate(top_n);
        }
        hits.sort_by(cmp);
        hits.into_iter()
            .map(|(d, s)| ScoredDoc {
                doc_id: self.doc_ids[d].clone(),
                score: s,
            })
            .collect()
    }

    /// Position of the first gold document in `search(query_text, cutoff)`.
    pub fn rank_of_gold(&self, query_text: &str, gold_doc_ids: &[String], cutoff: usize) -> RankResult {
        let cutoff = cutoff.max(1);
        self.search(query_text, cutoff)
            .iter()
            .position(|d| gold_doc_ids.iter().any(|g| *g == d.doc_id))
            .map_or(RankResult::missed(cutoff), |i| RankResult::found(i + 1, cutoff))
    }

    /// Serializes to the versioned binary layout documented in `docs/FORMATS.md`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = IndexHeader {
            k1: self.k1,
            b: self.b,
            n_docs: self.num_docs(),
            n_terms: self.vocab.len(),
            avgdl: self.avgdl,
            doc_ids: self.doc_ids.clone(),
            doc_lens: self.doc_lens.clone(),
            vocab: self.vocab.tokens().to_vec(),
            posting_counts: self.postings.iter().map(Vec::len).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for plist in &self.postings {
            for p in plist {
                out.extend_from_slice(&p.doc.to_le_bytes());
                out.extend_from_slice(&p.tf.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let corrupt = |message: String| Error::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 20 || &bytes[..8] != INDEX_MAGIC {
            return Err(corrupt("not an index file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != INDEX_VERSION {
            return Err(Error::Version {
                found: version,
                supported: INDEX_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header".into()));
        }
        let h: IndexHeader =
            serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let vocab = Vocabulary::from_tokens(h.vocab)?;
        if h.posting_counts.len() != vocab.len() || h.doc_ids.len() != h.n_docs || h.doc_lens.len() != h.n_docs {
            return Err(corrupt("inconsistent header counts".into()));
        }
        let mut blob = &body[hlen..];
        let mut postings = Vec::with_capacity(vocab.len());
        for (term, &count) in h.posting_counts.iter().enumerate() {
            if blob.len() < count * 8 {
                return Err(corrupt(format!("postings for term {term} truncated")));
            }
            let plist: Vec<Posting> = blob[..count * 8]
                .chunks_exact(8)
                .map(|c| Posting {
                    doc: u32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                    tf: u32::from_le_bytes(c[4..].try_into().expect("4 bytes")),
                })
                .collect();
            if plist.iter().any(|p| p.doc as usize >= h.n_docs) {
                return Err(corrupt(format!("postings for term {term} reference unknown documents")));
            }
            blob = &blob[count * 8..];
            postings.push(plist);
        }
        if !blob.is_empty() {
            return Err(corrupt("trailing bytes after postings".into()));
        }
        let doc_pos = h
            .doc_ids
            .iter()
            .enumerate()
            .map(|(i, d)| (d.clone(), i as u32))
            .collect();
        Ok(Self {
            k1: h.k1,
            b: h.b,
            vocab,
            doc_ids: h.doc_ids,
            doc_lens: h.doc_lens,
            avgdl: h.avgdl,
            postings,
            doc_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        persist::write_atomic(path, &bytes)?;
        Ok(persist::sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    k1: f64,
    b: f64,
    n_docs: usize,
    n_terms: usize,
    avgdl: f64,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    vocab: Vec<String>,
    posting_counts: Vec<usize>,
}
