use std::collections::{BTreeMap, HashSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{FeatureKey, LmState, MelmError, MelmModel};
use crate::corpus::{Caption, Token, Vocabulary};
use crate::mil::DetectedWordSet;
use crate::util::{indexed_substream, log_sigmoid, sigmoid, substream};

/// Which detector output feeds the Score feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// Image-level noisy-OR probability.
    #[default]
    ImageProb,
    /// Largest single-region probability.
    RawScore,
}

/// A caption as vocabulary tokens plus the detections it is conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub detections: Vec<(Token, f64)>,
}

impl Sentence {
    pub fn initial_state(&self) -> LmState {
        LmState::new(&self.detections)
    }
}

/// Detected words outside the vocabulary are dropped; caption words
/// outside it map to UNK (or fail without one).
pub fn prepare_sentences(
    vocab: &Vocabulary,
    data: &[(Caption, DetectedWordSet)],
    source: ScoreSource,
) -> Result<Vec<Sentence>, MelmError> {
    data.iter()
        .map(|(cap, det)| {
            let tokens = cap
                .tokens
                .iter()
                .map(|w| vocab.map_token(w).ok_or_else(|| MelmError::OutOfVocabulary(w.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Sentence { tokens, detections: detection_tokens(vocab, det, source) })
        })
        .collect()
}

pub fn detection_tokens(vocab: &Vocabulary, det: &DetectedWordSet, source: ScoreSource) -> Vec<(Token, f64)> {
    det.entries
        .iter()
        .filter_map(|e| {
            let s = match source {
                ScoreSource::ImageProb => e.image_prob,
                ScoreSource::RawScore => e.raw_score,
            };
            vocab.token(&e.word).map(|t| (t, s))
        })
        .collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct NceReport {
    /// Mean per-token NCE objective (higher is better) per epoch.
    pub objective: Vec<f64>,
    pub distinct_features: usize,
    pub distinct_slots: usize,
    pub collision_rate: f64,
}

fn log_noise_term(model: &MelmModel, t: Token, k: usize) -> f64 {
    (k as f64 * model.noise()[model.candidate_index(t)]).ln()
}

/// NCE objective for one position:
/// `log σ(Δ(target)) + Σ_j log σ(-Δ(noise_j))` with
/// `Δ(x) = s(x) - log(k q(x))` and `s` the unnormalized log-score.
pub fn nce_objective(model: &MelmModel, state: &LmState, target: Token, noise: &[Token]) -> f64 {
    let k = noise.len();
    let delta = |t: Token| model.unnormalized_score(state, t) - log_noise_term(model, t, k);
    log_sigmoid(delta(target)) + noise.iter().map(|&x| log_sigmoid(-delta(x))).sum::<f64>()
}

/// Gradient of [`nce_objective`] with respect to the hashed weights.
pub fn nce_gradient(model: &MelmModel, state: &LmState, target: Token, noise: &[Token]) -> BTreeMap<u32, f64> {
    let k = noise.len();
    let mut grad = BTreeMap::new();
    let mut add = |t: Token, coef: f64| {
        for (key, v) in model.features(state, t) {
            *grad.entry(model.slot(&key)).or_insert(0.0) += coef * v;
        }
    };
    let d = model.unnormalized_score(state, target) - log_noise_term(model, target, k);
    add(target, 1.0 - sigmoid(d));
    for &x in noise {
        let d = model.unnormalized_score(state, x) - log_noise_term(model, x, k);
        add(x, -sigmoid(d));
    }
    grad
}

/// Add-one smoothed unigram over the vocabulary and `</s>`.
pub fn unigram_noise(vocab_size: usize, sentences: &[Sentence]) -> Vec<f64> {
    let mut counts = vec![1.0; vocab_size + 1];
    for s in sentences {
        for t in &s.tokens {
            counts[t.index()] += 1.0;
        }
        counts[vocab_size] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

/// Trains by per-token stochastic gradient ascent on the NCE objective.
/// The remaining-word set shrinks as gold words are consumed, exactly as
/// during decoding. Learning rate decays as `lr / sqrt(epoch)`.
pub fn train_nce(model: &MelmModel, sentences: &[Sentence]) -> Result<(MelmModel, NceReport), MelmError> {
    let mut model = model.clone();
    let cfg = model.config.clone();
    let mut report = NceReport::default();
    if cfg.epochs == 0 || sentences.is_empty() {
        return Ok((model, report));
    }
    for s in sentences {
        if let Some(t) = s.tokens.iter().find(|t| t.is_boundary() || t.index() >= model.vocab_size()) {
            return Err(MelmError::Config(format!("token id {} outside the vocabulary", t.0)));
        }
    }
    model.set_noise(unigram_noise(model.vocab_size(), sentences));
    let sampler = WeightedIndex::new(model.noise()).expect("noise distribution is positive");
    let vocab_size = model.vocab_size();
    let to_token = |i: usize| if i == vocab_size { Token::END } else { Token(i as u32) };

    let mut noise_rng = substream(cfg.seed, "nce-noise");
    let mut seen_keys: HashSet<FeatureKey> = HashSet::new();
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut noise = vec![Token::END; cfg.nce_samples];

    for epoch in 1..=cfg.epochs {
        let lr = cfg.learning_rate / (epoch as f64).sqrt();
        order.shuffle(&mut indexed_substream(cfg.seed, "nce-order", epoch as u64));
        let (mut total, mut positions) = (0.0, 0usize);
        for &si in &order {
            let s = &sentences[si];
            let mut state = s.initial_state();
            for &target in s.tokens.iter().chain(std::iter::once(&Token::END)) {
                for slot in noise.iter_mut() {
                    *slot = to_token(sampler.sample(&mut noise_rng));
                }
                if epoch == 1 {
                    for &t in std::iter::once(&target).chain(noise.iter()) {
                        seen_keys.extend(model.features(&state, t).into_iter().map(|(k, _)| k));
                    }
                }
                total += nce_objective(&model, &state, target, &noise);
                positions += 1;
                for (slot, g) in nce_gradient(&model, &state, target, &noise) {
                    let delta = lr * g;
                    if !delta.is_finite() || !(model.weight(slot) + delta).is_finite() {
                        let key = model
                            .features(&state, target)
                            .into_iter()
                            .find(|(k, _)| model.slot(k) == slot)
                            .map(|(k, _)| format!("{k:?}"))
                            .unwrap_or_else(|| format!("slot {slot}"));
                        return Err(MelmError::NonFiniteUpdate(key));
                    }
                    model.add_to_slot(slot, delta);
                }
                state.push(target);
            }
        }
        report.objective.push(total / positions as f64);
    }
    let slots: HashSet<u32> = seen_keys.iter().map(|k| model.slot(k)).collect();
    report.distinct_features = seen_keys.len();
    report.distinct_slots = slots.len();
    report.collision_rate = if seen_keys.is_empty() { 0.0 } else { 1.0 - slots.len() as f64 / seen_keys.len() as f64 };
    Ok((model, report))
}

/// `2^(-(1/T) Σ log2 p)` over every predicted token including `</s>`,
/// with exact normalization.
pub fn perplexity(model: &MelmModel, sentences: &[Sentence]) -> Result<f64, MelmError> {
    let (mut log2_sum, mut count) = (0.0, 0usize);
    for s in sentences {
        let mut state = s.initial_state();
        for &t in s.tokens.iter().chain(std::iter::once(&Token::END)) {
            let lp = model.word_log_prob_exact(&state, t)?;
            if lp == f64::NEG_INFINITY {
                return Err(MelmError::ZeroProbability);
            }
            log2_sum += lp / std::f64::consts::LN_2;
            count += 1;
            state.push(t);
        }
    }
    if count == 0 {
        return Ok(1.0);
    }
    Ok((-log2_sum / count as f64).exp2())
}
