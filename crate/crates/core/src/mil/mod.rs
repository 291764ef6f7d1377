//! Noisy-OR multiple-instance word detectors.
//!
//! Each vocabulary word gets a logistic scorer over region features. An
//! image (a bag of regions) contains the word with probability
//! `1 - prod_j (1 - p_j)`, trained with bag-level cross entropy against
//! "word appears in some caption of the image" labels.

mod calibrate;
mod train;

pub use calibrate::{calibrate, CalibrationPoint, CalibrationTable};
pub use train::{bag_loss_and_grad, train_mil, MilConfig, MilTrainReport, SkipReason};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStats, DatasetEntry, Vocabulary};
use crate::util::{dot, sigmoid};

pub const MIL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum MilError {
    #[error("feature dimension {found} does not match detector dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("non-finite input to instance scorer")]
    NonFinite,
    #[error("noisy-OR over an empty bag")]
    EmptyBag,
    #[error("instance probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("training diverged for word '{word}' at step {step}")]
    Diverged { word: String, step: usize },
    #[error("no training bags")]
    NoBags,
    #[error("model was trained for vocabulary {expected:016x}, got {found:016x}")]
    VocabularyMismatch { expected: u64, found: u64 },
}

/// One image's regions and the vocabulary words its captions use.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionBag {
    pub image_id: String,
    pub regions: Vec<Vec<f64>>,
    pub positive_words: BTreeSet<String>,
}

impl RegionBag {
    pub fn from_entry(entry: &DatasetEntry, vocab: &Vocabulary) -> Self {
        let positive_words = entry
            .captions
            .iter()
            .flat_map(|c| c.tokens.iter())
            .filter(|t| vocab.token(t).is_some())
            .cloned()
            .collect();
        RegionBag { image_id: entry.image_id.clone(), regions: entry.regions.clone(), positive_words }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordDetector {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// False when the word lacked positive or negative bags; the detector
    /// then predicts the clamped base rate.
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilModel {
    pub vocab_fingerprint: u64,
    pub dim: usize,
    pub words: Vec<String>,
    pub detectors: Vec<WordDetector>,
    pub epochs: usize,
}

impl MilModel {
    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    /// Per-region probabilities of word `w`.
    pub fn region_probs(&self, w: usize, regions: &[Vec<f64>]) -> Result<Vec<f64>, MilError> {
        let d = &self.detectors[w];
        regions.iter().map(|r| instance_prob(r, &d.weights, d.bias)).collect()
    }

    /// (image-level noisy-OR probability, max region probability).
    pub fn image_prob(&self, w: usize, regions: &[Vec<f64>]) -> Result<(f64, f64), MilError> {
        let probs = self.region_probs(w, regions)?;
        let raw = probs.iter().cloned().fold(0.0, f64::max);
        // noisy-OR dominates its largest term; guard the last ulp
        let p = noisy_or(&probs)?.max(raw);
        Ok((p, raw))
    }
}

/// Logistic instance score σ(vᵀφ + u).
pub fn instance_prob(features: &[f64], weights: &[f64], bias: f64) -> Result<f64, MilError> {
    if features.len() != weights.len() {
        return Err(MilError::Dimension { expected: weights.len(), found: features.len() });
    }
    let z = dot(weights, features) + bias;
    if !z.is_finite() {
        return Err(MilError::NonFinite);
    }
    Ok(sigmoid(z))
}

/// Probability that at least one instance fires: `1 - Π (1 - p_j)`.
pub fn noisy_or(probs: &[f64]) -> Result<f64, MilError> {
    if probs.is_empty() {
        return Err(MilError::EmptyBag);
    }
    let mut off = 1.0;
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(MilError::BadProbability(p));
        }
        off *= 1.0 - p;
    }
    Ok(1.0 - off)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedWord {
    pub word: String,
    pub image_prob: f64,
    pub raw_score: f64,
}

/// Calibrated detections for one image, closed-class words removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DetectedWordSet {
    pub image_id: String,
    pub entries: Vec<DetectedWord>,
}

impl DetectedWordSet {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.word.as_str())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.iter().any(|e| e.word == word)
    }
}

/// Emits every word whose calibrated precision at this image's probability
/// reaches the table's τ, skipping closed-class words.
pub fn detect_words(
    model: &MilModel,
    calibration: &CalibrationTable,
    bag: &RegionBag,
    stats: &CorpusStats,
) -> Result<DetectedWordSet, MilError> {
    let mut entries = Vec::new();
    for (w, word) in model.words.iter().enumerate() {
        if stats.is_closed_class(word) {
            continue;
        }
        let (p, raw) = model.image_prob(w, &bag.regions)?;
        if calibration.precision_at(w, p) >= calibration.tau {
            entries.push(DetectedWord { word: word.clone(), image_prob: p, raw_score: raw });
        }
    }
    entries.sort_by(|a, b| b.image_prob.total_cmp(&a.image_prob).then_with(|| a.word.cmp(&b.word)));
    Ok(DetectedWordSet { image_id: bag.image_id.clone(), entries })
}

/// On-disk detector bundle: model, calibration and τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilArtifact {
    pub version: u32,
    pub model: MilModel,
    pub calibration: CalibrationTable,
}

impl MilArtifact {
    pub fn new(model: MilModel, calibration: CalibrationTable) -> Self {
        MilArtifact { version: MIL_FORMAT_VERSION, model, calibration }
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<(), MilError> {
        let found = vocab.fingerprint();
        if found != self.model.vocab_fingerprint {
            return Err(MilError::VocabularyMismatch { expected: self.model.vocab_fingerprint, found });
        }
        Ok(())
    }
}
