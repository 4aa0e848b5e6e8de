use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Document, QueryExample};
use crate::error::{Error, Result};

pub type TokenId = u32;

/// Word-level vocabulary with four reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    fingerprint: u64,
}

/// Token ids tagged with the fingerprint of the vocabulary that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub vocab: u64,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const BOS: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const UNK: TokenId = 3;
    pub const SPECIALS: [&'static str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

    /// Rebuilds a vocabulary from its id-ordered token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4].iter().zip(Self::SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::invalid("vocabulary must start with <pad> <bos> <eos> <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let mut h = Sha256::new();
        for t in &tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        let fingerprint = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        Ok(Self {
            tokens,
            index,
            fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn is_special(id: TokenId) -> bool {
        id < 4
    }

    /// Renders ids as space-joined words. Specials are dropped and decoding stops at EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            if id == Self::EOS {
                break;
            }
            if Self::is_special(id) {
                continue;
            }
            if let Some(t) = self.token(id) {
                words.push(t);
            }
        }
        words.join(" ")
    }
}

/// Lowercased alphanumeric runs; everything else separates words.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Maps text to ids; out-of-vocabulary words become UNK. No BOS/EOS is added.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSeq {
    TokenSeq {
        ids: words(text)
            .map(|w| vocab.id(&w).unwrap_or(Vocabulary::UNK))
            .collect(),
        vocab: vocab.fingerprint(),
    }
}

/// Builds a vocabulary over document texts and questions.
///
/// Ids after the specials are assigned by descending count, then lexicographically.
/// Words seen fewer than `min_count` times are left out (they tokenize to UNK).
pub fn build_vocab(corpus: &[Document], queries: &[QueryExample], min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::invalid("min_count must be at least 1"));
    }
    if corpus.is_empty() && queries.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from empty inputs"));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let texts = corpus
        .iter()
        .map(|d| d.text.as_str())
        .chain(queries.iter().map(|q| q.question.as_str()));
    for text in texts {
        for w in words(text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = Vocabulary::SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(w, _)| w))
        .collect();
    Vocabulary::from_tokens(tokens)
}

/// Extends a vocabulary with extra words (appended in the given order, duplicates skipped).
pub fn extend_vocab(vocab: &Vocabulary, extra: impl IntoIterator<Item = String>) -> Result<Vocabulary> {
    let mut tokens = vocab.tokens().to_vec();
    for w in extra {
        if vocab.id(&w).is_none() && !tokens.contains(&w) {
            tokens.push(w);
        }
    }
    Vocabulary::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Document {
        Document {
            id: "d".into(),
            text: text.into(),
        }
    }

    #[test]
    fn vocab_counts_and_specials() {
        let v = build_vocab(&[doc("a b a")], &[], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), Some(5));
        assert_eq!(&v.tokens()[..4], &Vocabulary::SPECIALS.map(String::from));
    }

    #[test]
    fn min_count_drops_rare_words() {
        let v = build_vocab(&[doc("a b a")], &[], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(tokenize("b", &v).ids, vec![Vocabulary::UNK]);
        assert_eq!(tokenize("a", &v).ids, vec![4]);
    }

    #[test]
    fn vocab_is_deterministic() {
        let docs = [doc("zeta alpha beta alpha"), doc("Beta, gamma!")];
        let a = build_vocab(&docs, &[], 1).unwrap();
        let b = build_vocab(&docs, &[], 1).unwrap();
        assert_eq!(a, b);
        // beta and alpha both occur twice; lexicographic order breaks the tie
        assert_eq!(a.id("alpha"), Some(4));
        assert_eq!(a.id("beta"), Some(5));
    }

    #[test]
    fn build_vocab_rejects_bad_input() {
        assert!(build_vocab(&[], &[], 1).is_err());
        assert!(build_vocab(&[doc("a")], &[], 0).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let v = build_vocab(&[doc("a b")], &[], 1).unwrap();
        assert_eq!(tokenize("A b", &v).ids, vec![4, 5]);
        assert_eq!(tokenize("zzz", &v).ids, vec![Vocabulary::UNK]);
        assert!(tokenize("", &v).is_empty());
        assert_eq!(tokenize("a, b!", &v).ids, vec![4, 5]);
    }

    #[test]
    fn decode_stops_at_eos_and_skips_specials() {
        let v = build_vocab(&[doc("a b")], &[], 1).unwrap();
        assert_eq!(v.decode(&[Vocabulary::BOS, 4, 5, Vocabulary::EOS, 4]), "a b");
        assert_eq!(v.decode(&[4, Vocabulary::UNK, 5]), "a b");
    }

    #[test]
    fn from_tokens_validates() {
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        let mut t: Vec<String> = Vocabulary::SPECIALS.iter().map(|s| s.to_string()).collect();
        t.push("x".into());
        t.push("x".into());
        assert!(Vocabulary::from_tokens(t).is_err());
    }
}
