//! Corpus and query ingestion, tokenization and the synthetic dataset generator.
//!
//! Both file formats are JSONL, one object per line:
//!
//! ```text
//! corpus:  {"id":"d1","text":"..."}
//! queries: {"id":"q1","question":"...","gold_doc_ids":["d1"]}
//! ```
//!
//! Relevance is membership in `gold_doc_ids`; nothing else is read from a query record.

mod synth;
mod vocab;

pub use synth::{gen_synthetic, SyntheticDataset, SYNTH_TEMPLATE_WORDS};
pub use vocab::{build_vocab, extend_vocab, tokenize, words, TokenId, TokenSeq, Vocabulary};

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

/// A corpus passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

/// A question together with the ids of the documents that answer it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryExample {
    pub id: String,
    pub question: String,
    pub gold_doc_ids: Vec<String>,
}

impl QueryExample {
    pub fn is_gold(&self, doc_id: &str) -> bool {
        self.gold_doc_ids.iter().any(|g| g == doc_id)
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Serializes records as compact JSONL. Output is byte-stable for equal inputs.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Reads any JSONL file of `T` records; malformed lines report their line number.
pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, v)| v).collect())
}

/// Writes JSONL atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    crate::persist::write_atomic(path, to_jsonl(records)?.as_bytes())
}

/// Loads a corpus file, preserving file order and rejecting duplicate ids.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let rows: Vec<(usize, Document)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(rows.len());
    for (line, doc) in rows {
        if doc.id.is_empty() || doc.text.trim().is_empty() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: "document id and text must be non-empty".into(),
            });
        }
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

/// Loads queries. When `corpus_ids` is given every gold id must be present in it.
pub fn load_queries(path: &Path, corpus_ids: Option<&HashSet<String>>) -> Result<Vec<QueryExample>> {
    let rows: Vec<(usize, QueryExample)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (line, q) in rows {
        if q.id.is_empty() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line,
                message: "query id must be non-empty".into(),
            });
        }
        validate_query(&q, corpus_ids)?;
        if !seen.insert(q.id.clone()) {
            return Err(Error::DuplicateId(q.id));
        }
        out.push(q);
    }
    Ok(out)
}

pub fn validate_query(q: &QueryExample, corpus_ids: Option<&HashSet<String>>) -> Result<()> {
    if q.gold_doc_ids.is_empty() {
        return Err(Error::EmptyGold(q.id.clone()));
    }
    if let Some(ids) = corpus_ids {
        if let Some(missing) = q.gold_doc_ids.iter().find(|g| !ids.contains(*g)) {
            return Err(Error::UnknownGold {
                query: q.id.clone(),
                doc: missing.clone(),
            });
        }
    }
    Ok(())
}

pub fn corpus_ids(docs: &[Document]) -> HashSet<String> {
    docs.iter().map(|d| d.id.clone()).collect()
}

pub fn save_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    write_jsonl(path, docs)
}

pub fn save_queries(path: &Path, queries: &[QueryExample]) -> Result<()> {
    write_jsonl(path, queries)
}

/// Writes records to any sink as JSONL.
pub fn write_jsonl_to<T: Serialize, W: Write>(mut w: W, records: &[T]) -> Result<()> {
    w.write_all(to_jsonl(records)?.as_bytes())
        .map_err(|e| Error::io("<stream>", e))
}
