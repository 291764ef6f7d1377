//! Maximum-entropy language model conditioned on the detected words that
//! have not been mentioned yet.
//!
//! `P(w | history, remaining) ∝ exp(Σ_k λ_k f_k(w, history, remaining))`,
//! normalized over the vocabulary plus `</s>`. Weights live in a hashed
//! table; colliding features share a weight. Training uses noise-contrastive
//! estimation, which never touches the normalizer; exact normalization is
//! only needed for probabilities and perplexity.

mod features;
mod nce;

pub use features::{extract_features, FeatureConfig, FeatureKey, LmState, Template, MAX_ORDER};
pub use nce::{detection_tokens, nce_gradient, nce_objective, perplexity, prepare_sentences, train_nce, NceReport, ScoreSource, Sentence};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Token, Vocabulary};
use crate::util::log_sum_exp;

pub const MELM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum MelmError {
    #[error("non-finite value while scoring")]
    NonFinite,
    #[error("non-finite update on feature {0}")]
    NonFiniteUpdate(String),
    #[error("word '{0}' is not in the vocabulary and there is no UNK slot")]
    OutOfVocabulary(String),
    #[error("zero-probability event")]
    ZeroProbability,
    #[error("model was trained for vocabulary {expected:016x}, got {found:016x}")]
    VocabularyMismatch { expected: u64, found: u64 },
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelmConfig {
    pub hash_bits: u32,
    pub features: FeatureConfig,
    pub nce_samples: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub score_source: ScoreSource,
    pub seed: u64,
}

impl Default for MelmConfig {
    fn default() -> Self {
        MelmConfig {
            hash_bits: 22,
            features: FeatureConfig::default(),
            nce_samples: 15,
            learning_rate: 0.1,
            epochs: 10,
            score_source: ScoreSource::ImageProb,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelmModel {
    pub config: MelmConfig,
    vocab_size: usize,
    vocab_fingerprint: u64,
    weights: HashMap<u32, f64>,
    /// Noise distribution over the vocabulary followed by `</s>`.
    noise: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MelmRecord {
    version: u32,
    hash_bits: u32,
    vocab_size: usize,
    vocab_fingerprint: u64,
    config: MelmConfig,
    noise_distribution: String,
    noise: Vec<f64>,
    /// Nonzero slots in ascending order.
    weights: Vec<(u32, f64)>,
}

impl Serialize for MelmModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut weights: Vec<(u32, f64)> = self.weights.iter().filter(|(_, &v)| v != 0.0).map(|(&k, &v)| (k, v)).collect();
        weights.sort_by_key(|(k, _)| *k);
        MelmRecord {
            version: MELM_FORMAT_VERSION,
            hash_bits: self.config.hash_bits,
            vocab_size: self.vocab_size,
            vocab_fingerprint: self.vocab_fingerprint,
            config: self.config.clone(),
            noise_distribution: "unigram_add_one".into(),
            noise: self.noise.clone(),
            weights,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MelmModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = MelmRecord::deserialize(d)?;
        if r.version != MELM_FORMAT_VERSION {
            return Err(serde::de::Error::custom(format!("unsupported LM format version {}", r.version)));
        }
        if r.noise.len() != r.vocab_size + 1 {
            return Err(serde::de::Error::custom("noise distribution length does not match vocabulary"));
        }
        Ok(MelmModel {
            config: r.config,
            vocab_size: r.vocab_size,
            vocab_fingerprint: r.vocab_fingerprint,
            weights: r.weights.into_iter().collect(),
            noise: r.noise,
        })
    }
}

impl MelmModel {
    /// All-zero weights with a uniform noise distribution.
    pub fn new(vocab: &Vocabulary, config: MelmConfig) -> Result<Self, MelmError> {
        if !(1..=31).contains(&config.hash_bits) {
            return Err(MelmError::Config(format!("hash_bits {} outside 1..=31", config.hash_bits)));
        }
        if config.features.n_max == 0 || config.features.n_max > MAX_ORDER {
            return Err(MelmError::Config(format!("n_max {} outside 1..={MAX_ORDER}", config.features.n_max)));
        }
        if config.nce_samples == 0 {
            return Err(MelmError::Config("nce_samples must be positive".into()));
        }
        let n = vocab.len() + 1;
        Ok(MelmModel {
            config,
            vocab_size: vocab.len(),
            vocab_fingerprint: vocab.fingerprint(),
            weights: HashMap::new(),
            noise: vec![1.0 / n as f64; n],
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<(), MelmError> {
        let found = vocab.fingerprint();
        if found != self.vocab_fingerprint || vocab.len() != self.vocab_size {
            return Err(MelmError::VocabularyMismatch { expected: self.vocab_fingerprint, found });
        }
        Ok(())
    }

    /// Every predictable token: vocabulary ids in order, then `</s>`.
    pub fn candidates(&self) -> impl Iterator<Item = Token> {
        (0..self.vocab_size as u32).map(Token).chain(std::iter::once(Token::END))
    }

    pub fn candidate_index(&self, t: Token) -> usize {
        if t == Token::END {
            self.vocab_size
        } else {
            t.index()
        }
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn slot(&self, key: &FeatureKey) -> u32 {
        key.slot(self.config.hash_bits)
    }

    pub fn weight(&self, slot: u32) -> f64 {
        self.weights.get(&slot).copied().unwrap_or(0.0)
    }

    pub fn set_weight(&mut self, slot: u32, value: f64) {
        if value == 0.0 {
            self.weights.remove(&slot);
        } else {
            self.weights.insert(slot, value);
        }
    }

    pub fn key_weight(&self, key: &FeatureKey) -> f64 {
        self.weight(self.slot(key))
    }

    pub fn set_key_weight(&mut self, key: &FeatureKey, value: f64) {
        let s = self.slot(key);
        self.set_weight(s, value);
    }

    pub fn nonzero_weights(&self) -> usize {
        self.weights.values().filter(|&&v| v != 0.0).count()
    }

    pub fn features(&self, state: &LmState, candidate: Token) -> Vec<(FeatureKey, f64)> {
        extract_features(state, candidate, &self.config.features)
    }

    /// `Σ_k λ_k f_k`, the log of the unnormalized probability.
    pub fn unnormalized_score(&self, state: &LmState, candidate: Token) -> f64 {
        self.features(state, candidate).iter().map(|(k, v)| self.key_weight(k) * v).sum()
    }

    /// Exact log-probabilities of every candidate, in [`candidates`](Self::candidates) order.
    pub fn log_distribution(&self, state: &LmState) -> Result<Vec<f64>, MelmError> {
        let scores: Vec<f64> = self.candidates().map(|c| self.unnormalized_score(state, c)).collect();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(MelmError::NonFinite);
        }
        let z = log_sum_exp(&scores);
        Ok(scores.into_iter().map(|s| s - z).collect())
    }

    pub fn word_log_prob_exact(&self, state: &LmState, candidate: Token) -> Result<f64, MelmError> {
        let s = self.unnormalized_score(state, candidate);
        let scores: Vec<f64> = self.candidates().map(|c| self.unnormalized_score(state, c)).collect();
        if !s.is_finite() || scores.iter().any(|s| !s.is_finite()) {
            return Err(MelmError::NonFinite);
        }
        Ok(s - log_sum_exp(&scores))
    }

    /// Softmax probability over the vocabulary plus `</s>`.
    pub fn word_prob_exact(&self, state: &LmState, candidate: Token) -> Result<f64, MelmError> {
        self.word_log_prob_exact(state, candidate).map(f64::exp)
    }

    pub(crate) fn add_to_slot(&mut self, slot: u32, delta: f64) {
        *self.weights.entry(slot).or_insert(0.0) += delta;
    }

    pub(crate) fn set_noise(&mut self, noise: Vec<f64>) {
        debug_assert_eq!(noise.len(), self.vocab_size + 1);
        self.noise = noise;
    }
}
