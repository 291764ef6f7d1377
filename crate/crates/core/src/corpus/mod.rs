//! Dataset ingestion, tokenization, vocabulary and corpus statistics.

mod dataset;
mod stats;
mod vocab;

pub use dataset::{apportion, split_dataset, Dataset, DatasetEntry, DatasetHeader, Split};
pub use stats::{build_stats, ClosedClassPolicy, CorpusStats, StatsConfig, CLOSED_CLASS_LEXICON, COCO_CLOSED_CLASS};
pub use vocab::{build_vocabulary, Vocabulary, UNK_WORD};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: expected feature dimension {expected}, found {found}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("vocabulary size must be at least 1")]
    EmptyVocabularyRequest,
    #[error("invalid split ratios {0:?}")]
    BadRatios([f64; 3]),
}

/// A word id. Vocabulary words occupy `0..vocab.len()`; the sentence
/// boundary markers sit at the top of the `u32` range, outside any
/// vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Token(pub u32);

impl Token {
    pub const START: Token = Token(u32::MAX);
    pub const END: Token = Token(u32::MAX - 1);

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_boundary(self) -> bool {
        self == Token::START || self == Token::END
    }
}

/// One tokenized caption of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub image_id: String,
    pub tokens: Vec<String>,
    pub raw: String,
}

impl Caption {
    /// Returns `None` when `raw` has no tokens.
    pub fn new(image_id: impl Into<String>, raw: impl Into<String>) -> Option<Self> {
        let raw = raw.into();
        let tokens = tokenize(&raw);
        if tokens.is_empty() {
            return None;
        }
        Some(Caption { image_id: image_id.into(), tokens, raw })
    }

    pub fn from_tokens<S: AsRef<str>>(image_id: impl Into<String>, tokens: &[S]) -> Self {
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        let raw = tokens.join(" ");
        Caption { image_id: image_id.into(), tokens, raw }
    }
}

/// Lowercases, drops punctuation (apostrophes survive only between two
/// alphanumeric characters) and splits on whitespace.
pub fn tokenize(raw: &str) -> Vec<String> {
    let chars: Vec<char> = raw.chars().collect();
    let mut cleaned = String::with_capacity(raw.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cleaned.extend(c.to_lowercase());
        } else if c.is_whitespace() {
            cleaned.push(' ');
        } else if c == '\'' {
            let prev = i > 0 && chars[i - 1].is_alphanumeric();
            let next = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            if prev && next {
                cleaned.push('\'');
            }
        }
    }
    cleaned.split_whitespace().map(str::to_string).collect()
}
