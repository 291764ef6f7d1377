use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Caption, CorpusError, Token};
use crate::util::Fnv64;

/// Reserved word that out-of-vocabulary tokens map to, when present.
pub const UNK_WORD: &str = "<unk>";

#[derive(Serialize, Deserialize)]
struct VocabularyRecord {
    words: Vec<String>,
    counts: Vec<u64>,
    coverage: f64,
    unk: Option<usize>,
}

/// Frequency-ranked word list. Rank 0 is the most frequent word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabularyRecord", into = "VocabularyRecord")]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
    coverage: f64,
    unk: Option<usize>,
}

impl From<VocabularyRecord> for Vocabulary {
    fn from(r: VocabularyRecord) -> Self {
        let index = r.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words: r.words, counts: r.counts, index, coverage: r.coverage, unk: r.unk }
    }
}

impl From<Vocabulary> for VocabularyRecord {
    fn from(v: Vocabulary) -> Self {
        VocabularyRecord { words: v.words, counts: v.counts, coverage: v.coverage, unk: v.unk }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit word list (counts all zero).
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let words: Vec<String> = words.iter().map(|w| w.as_ref().to_string()).collect();
        let counts = vec![0; words.len()];
        VocabularyRecord { words, counts, coverage: 0.0, unk: None }.into()
    }

    /// Appends the reserved [`UNK_WORD`] as the last vocabulary slot.
    pub fn with_unk(mut self) -> Self {
        if self.unk.is_none() {
            let i = self.words.len();
            self.words.push(UNK_WORD.to_string());
            self.counts.push(0);
            self.index.insert(UNK_WORD.to_string(), i);
            self.unk = Some(i);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Fraction of corpus token occurrences covered by the vocabulary.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn unk(&self) -> Option<Token> {
        self.unk.map(|i| Token(i as u32))
    }

    pub fn token(&self, word: &str) -> Option<Token> {
        self.index.get(word).map(|&i| Token(i as u32))
    }

    /// Like [`token`](Self::token) but falls back to the UNK slot.
    pub fn map_token(&self, word: &str) -> Option<Token> {
        self.token(word).or_else(|| self.unk())
    }

    pub fn word(&self, token: Token) -> &str {
        match token {
            Token::START => "<s>",
            Token::END => "</s>",
            t => &self.words[t.index()],
        }
    }

    pub fn tokens(&self) -> impl Iterator<Item = Token> + '_ {
        (0..self.words.len() as u32).map(Token)
    }

    /// Maps every word, using UNK for unknown words. `None` if a word is
    /// unknown and there is no UNK slot.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Option<Vec<Token>> {
        words.iter().map(|w| self.map_token(w.as_ref())).collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> Vec<String> {
        tokens.iter().map(|&t| self.word(t).to_string()).collect()
    }

    /// Stable fingerprint of the word list, stored in model files.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        for w in &self.words {
            h.write(w.as_bytes()).write(&[0]);
        }
        h.finish()
    }
}

/// Keeps the `size` most frequent tokens of `captions`; ties go to the
/// lexicographically smaller word. Returns fewer words when the corpus has
/// fewer distinct tokens.
pub fn build_vocabulary(captions: &[Caption], size: usize) -> Result<Vocabulary, CorpusError> {
    if size == 0 {
        return Err(CorpusError::EmptyVocabularyRequest);
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    let mut total = 0u64;
    for c in captions {
        for t in &c.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
            total += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(size);
    let covered: u64 = ranked.iter().map(|(_, c)| c).sum();
    let coverage = if total == 0 { 0.0 } else { covered as f64 / total as f64 };
    Ok(VocabularyRecord {
        words: ranked.iter().map(|(w, _)| w.to_string()).collect(),
        counts: ranked.iter().map(|(_, c)| *c).collect(),
        coverage,
        unk: None,
    }
    .into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caps(lists: &[&[&str]]) -> Vec<Caption> {
        lists.iter().map(|l| Caption::from_tokens("i", l)).collect()
    }

    #[test]
    fn top_one_with_coverage() {
        let v = build_vocabulary(&caps(&[&["a", "b"], &["a"]]), 1).unwrap();
        assert_eq!(v.words(), ["a"]);
        assert!((v.coverage() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_are_lexicographic() {
        let v = build_vocabulary(&caps(&[&["y", "x"], &["x", "y"]]), 2).unwrap();
        assert_eq!(v.words(), ["x", "y"]);
    }

    #[test]
    fn short_corpus_returns_all() {
        let v = build_vocabulary(&caps(&[&["b", "a", "b"]]), 10).unwrap();
        assert_eq!(v.words(), ["b", "a"]);
        assert_eq!(v.coverage(), 1.0);
    }

    #[test]
    fn zero_size_rejected() {
        assert!(build_vocabulary(&[], 0).is_err());
    }

    #[test]
    fn unk_occupies_last_slot() {
        let v = build_vocabulary(&caps(&[&["a", "b", "a"]]), 5).unwrap().with_unk();
        assert_eq!(v.len(), 3);
        assert_eq!(v.unk(), Some(Token(2)));
        assert_eq!(v.map_token("zebra"), Some(Token(2)));
        assert_eq!(v.map_token("b"), Some(Token(1)));
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let v = build_vocabulary(&caps(&[&["a", "b", "a"]]), 5).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.token("b"), Some(Token(1)));
    }
}
