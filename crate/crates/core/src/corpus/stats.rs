use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Caption, Token, Vocabulary};

/// The fifteen most frequent closed-class words of English image captions.
pub const COCO_CLOSED_CLASS: [&str; 15] = [
    "a", "on", "of", "the", "in", "with", "and", "is", "to", "an", "at", "are", "next", "that", "it",
];

/// Closed-class lexicon used when the closed-class set is recomputed from a
/// corpus: articles, determiners, prepositions, conjunctions, pronouns and
/// auxiliaries.
pub const CLOSED_CLASS_LEXICON: &[&str] = &[
    "a", "about", "above", "across", "after", "against", "along", "am", "among", "an", "and",
    "are", "around", "as", "at", "be", "been", "behind", "being", "below", "beneath", "beside",
    "between", "beyond", "both", "but", "by", "can", "could", "did", "do", "does", "down",
    "during", "each", "either", "every", "for", "from", "had", "has", "have", "he", "her",
    "hers", "him", "his", "i", "if", "in", "inside", "into", "is", "it", "its", "may", "me",
    "might", "my", "near", "next", "nor", "of", "off", "on", "onto", "or", "our", "out",
    "outside", "over", "past", "she", "should", "since", "so", "some", "than", "that", "the",
    "their", "them", "these", "they", "this", "those", "through", "to", "toward", "towards",
    "under", "underneath", "until", "up", "upon", "us", "was", "we", "were", "what", "which",
    "while", "who", "will", "with", "within", "without", "would", "you", "your",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClosedClassPolicy {
    /// Use [`COCO_CLOSED_CLASS`] as is.
    #[default]
    Fixed,
    /// Take the 15 most frequent corpus words that are in [`CLOSED_CLASS_LEXICON`].
    Recompute,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsConfig {
    pub frequent_words: usize,
    pub closed_class: ClosedClassPolicy,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig { frequent_words: 100, closed_class: ClosedClassPolicy::Fixed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub unigram_counts: BTreeMap<String, u64>,
    /// Observed next words, keyed by vocabulary token or [`Token::START`].
    pub successor_table: BTreeMap<Token, BTreeSet<Token>>,
    /// Most frequent vocabulary words, UNK excluded.
    pub frequent_words: Vec<Token>,
    pub closed_class: BTreeSet<String>,
}

impl CorpusStats {
    pub fn successors(&self, token: Token) -> Option<&BTreeSet<Token>> {
        self.successor_table.get(&token)
    }

    pub fn is_closed_class(&self, word: &str) -> bool {
        self.closed_class.contains(word)
    }
}

/// Counts unigrams and records every adjacent pair (including start → first
/// word). Words outside the vocabulary map to UNK when it exists; otherwise
/// pairs touching them are skipped.
pub fn build_stats(captions: &[Caption], vocab: &Vocabulary, config: &StatsConfig) -> CorpusStats {
    let mut unigram_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut successor_table: BTreeMap<Token, BTreeSet<Token>> = BTreeMap::new();
    for c in captions {
        let mut prev = Some(Token::START);
        for w in &c.tokens {
            *unigram_counts.entry(w.clone()).or_default() += 1;
            let cur = vocab.map_token(w);
            if let (Some(p), Some(t)) = (prev, cur) {
                successor_table.entry(p).or_default().insert(t);
            }
            prev = cur;
        }
    }

    let unk = vocab.unk();
    let frequent_words = vocab
        .tokens()
        .filter(|t| Some(*t) != unk)
        .take(config.frequent_words)
        .collect();

    let closed_class = match config.closed_class {
        ClosedClassPolicy::Fixed => COCO_CLOSED_CLASS.iter().map(|s| s.to_string()).collect(),
        ClosedClassPolicy::Recompute => {
            let mut present: Vec<(&str, u64)> = CLOSED_CLASS_LEXICON
                .iter()
                .filter_map(|w| unigram_counts.get(*w).map(|&c| (*w, c)))
                .collect();
            present.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
            present.into_iter().take(15).map(|(w, _)| w.to_string()).collect()
        }
    };

    CorpusStats { unigram_counts, successor_table, frequent_words, closed_class }
}
