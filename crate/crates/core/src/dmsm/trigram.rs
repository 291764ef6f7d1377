use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::util::fnv64;

/// Counts of the letter triples of `#word#`.
pub fn letter_trigram_vector(word: &str) -> BTreeMap<String, u32> {
    let padded: Vec<char> = std::iter::once('#').chain(word.chars()).chain(std::iter::once('#')).collect();
    let mut out = BTreeMap::new();
    for w in padded.windows(3) {
        *out.entry(w.iter().collect::<String>()).or_insert(0) += 1;
    }
    out
}

/// Sparse vector as sorted `(index, value)` pairs.
pub type SparseVec = Vec<(usize, f64)>;

/// Enumerates the trigrams of a training vocabulary; anything else hashes
/// into a fixed overflow band after them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigramIndex {
    known: BTreeMap<String, usize>,
    overflow: usize,
}

impl TrigramIndex {
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>, overflow: usize) -> Self {
        let mut all = std::collections::BTreeSet::new();
        for w in words {
            all.extend(letter_trigram_vector(w).into_keys());
        }
        let known = all.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        TrigramIndex { known, overflow }
    }

    pub fn dim(&self) -> usize {
        self.known.len() + self.overflow
    }

    pub fn known(&self) -> usize {
        self.known.len()
    }

    pub fn index_of(&self, trigram: &str) -> Option<usize> {
        match self.known.get(trigram) {
            Some(&i) => Some(i),
            None if self.overflow > 0 => Some(self.known.len() + (fnv64(trigram.as_bytes()) % self.overflow as u64) as usize),
            None => None,
        }
    }

    pub fn encode(&self, word: &str) -> SparseVec {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for (t, c) in letter_trigram_vector(word) {
            if let Some(i) = self.index_of(&t) {
                *acc.entry(i).or_insert(0.0) += f64::from(c);
            }
        }
        acc.into_iter().collect()
    }
}
