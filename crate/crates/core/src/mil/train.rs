use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{MilError, MilModel, RegionBag, WordDetector};
use crate::corpus::Vocabulary;
use crate::util::{dot, indexed_substream, log_sigmoid, logit, sigmoid};

/// Floor on each `(1 - p_j)` factor inside the training loss.
const FACTOR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MilConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig { learning_rate: 0.05, epochs: 3, tau: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    NoPositiveBags,
    NoNegativeBags,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MilTrainReport {
    pub skipped: Vec<(String, SkipReason)>,
    /// Mean bag loss per epoch, per word (empty for skipped words).
    pub loss_history: Vec<Vec<f64>>,
}

/// Bag cross entropy and its gradient with respect to `(weights, bias)`.
///
/// With `z_j = vᵀφ_j + u`, `log(1 - P) = Σ_j log σ(-z_j)`, so a negative bag
/// costs `Σ_j softplus(z_j)` and a positive one `-log(1 - exp(Σ_j log σ(-z_j)))`.
pub fn bag_loss_and_grad(weights: &[f64], bias: f64, regions: &[Vec<f64>], positive: bool) -> (f64, Vec<f64>, f64) {
    let floor = FACTOR_FLOOR.ln();
    let mut log_off = 0.0;
    let mut probs = Vec::with_capacity(regions.len());
    for r in regions {
        let z = dot(weights, r) + bias;
        let l = log_sigmoid(-z);
        if l < floor {
            log_off += floor;
            probs.push(None);
        } else {
            log_off += l;
            probs.push(Some(sigmoid(z)));
        }
    }
    let (loss, scale) = if positive {
        let p_on = -f64::exp_m1(log_off);
        let off = log_off.exp();
        (-p_on.ln(), -off / p_on)
    } else {
        (-log_off, 1.0)
    };
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (r, p) in regions.iter().zip(&probs) {
        if let Some(p) = p {
            let dz = scale * p;
            gb += dz;
            for (g, x) in gw.iter_mut().zip(r) {
                *g += dz * x;
            }
        }
    }
    (loss, gw, gb)
}

/// Trains one detector per vocabulary word with per-image SGD. Words are
/// independent and trained in parallel; each has its own shuffling stream,
/// so results do not depend on thread scheduling.
pub fn train_mil(bags: &[RegionBag], vocab: &Vocabulary, config: &MilConfig) -> Result<(MilModel, MilTrainReport), MilError> {
    let first = bags.first().ok_or(MilError::NoBags)?;
    let dim = first.regions.first().map(Vec::len).ok_or(MilError::EmptyBag)?;
    for b in bags {
        if b.regions.is_empty() {
            return Err(MilError::EmptyBag);
        }
        if let Some(r) = b.regions.iter().find(|r| r.len() != dim) {
            return Err(MilError::Dimension { expected: dim, found: r.len() });
        }
    }

    let words = vocab.words();
    let results: Vec<Result<(WordDetector, Option<SkipReason>, Vec<f64>), MilError>> = words
        .par_iter()
        .enumerate()
        .map(|(w, word)| train_word(w, word, bags, dim, config))
        .collect();

    let mut detectors = Vec::with_capacity(words.len());
    let mut report = MilTrainReport::default();
    for (word, r) in words.iter().zip(results) {
        let (det, skip, hist) = r?;
        if let Some(reason) = skip {
            report.skipped.push((word.clone(), reason));
        }
        detectors.push(det);
        report.loss_history.push(hist);
    }
    let model = MilModel {
        vocab_fingerprint: vocab.fingerprint(),
        dim,
        words: words.to_vec(),
        detectors,
        epochs: config.epochs,
    };
    Ok((model, report))
}

type WordResult = (WordDetector, Option<SkipReason>, Vec<f64>);

fn train_word(w: usize, word: &str, bags: &[RegionBag], dim: usize, config: &MilConfig) -> Result<WordResult, MilError> {
    let labels: Vec<bool> = bags.iter().map(|b| b.positive_words.contains(word)).collect();
    let positives = labels.iter().filter(|&&l| l).count();
    let rate = positives as f64 / bags.len() as f64;
    let mut det = WordDetector { weights: vec![0.0; dim], bias: logit(rate.clamp(1e-6, 1.0 - 1e-6)), trained: false };
    if positives == 0 {
        return Ok((det, Some(SkipReason::NoPositiveBags), Vec::new()));
    }
    if positives == bags.len() {
        return Ok((det, Some(SkipReason::NoNegativeBags), Vec::new()));
    }
    det.trained = true;

    let mut rng = indexed_substream(config.seed, "mil", w as u64);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, gw, gb) = bag_loss_and_grad(&det.weights, det.bias, &bags[i].regions, labels[i]);
            if !loss.is_finite() || !gb.is_finite() || gw.iter().any(|g| !g.is_finite()) {
                return Err(MilError::Diverged { word: word.to_string(), step });
            }
            for (v, g) in det.weights.iter_mut().zip(&gw) {
                *v -= config.learning_rate * g;
            }
            det.bias -= config.learning_rate * gb;
            if !det.bias.is_finite() || det.weights.iter().any(|v| !v.is_finite()) {
                return Err(MilError::Diverged { word: word.to_string(), step });
            }
            total += loss;
            step += 1;
        }
        history.push(total / bags.len() as f64);
    }
    Ok((det, None, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::noisy_or;
    use std::collections::BTreeSet;

    fn bag(id: &str, regions: Vec<Vec<f64>>, words: &[&str]) -> RegionBag {
        RegionBag {
            image_id: id.into(),
            regions,
            positive_words: words.iter().map(|w| w.to_string()).collect::<BTreeSet<_>>(),
        }
    }

    /// Direct product form of the bag cross entropy.
    fn oracle_loss(w: &[f64], b: f64, regions: &[Vec<f64>], positive: bool) -> f64 {
        let probs: Vec<f64> = regions
            .iter()
            .map(|r| {
                let z: f64 = w.iter().zip(r).map(|(a, c)| a * c).sum::<f64>() + b;
                1.0 / (1.0 + (-z).exp())
            })
            .collect();
        let p = noisy_or(&probs).unwrap();
        if positive {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    #[test]
    fn loss_matches_product_form() {
        let regions = vec![vec![0.3, -1.0], vec![1.2, 0.4], vec![-0.5, 0.5]];
        for &pos in &[true, false] {
            let (l, _, _) = bag_loss_and_grad(&[0.4, -0.2], 0.1, &regions, pos);
            assert!((l - oracle_loss(&[0.4, -0.2], 0.1, &regions, pos)).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_two_bag_toy_converges() {
        let bags = vec![bag("p", vec![vec![1.0]], &["cat"]), bag("n", vec![vec![-1.0]], &[])];
        let vocab = Vocabulary::from_words(&["cat"]);
        let cfg = MilConfig { epochs: 2000, learning_rate: 0.5, ..Default::default() };
        let (m, report) = train_mil(&bags, &vocab, &cfg).unwrap();
        let (pp, _) = m.image_prob(0, &bags[0].regions).unwrap();
        let (pn, _) = m.image_prob(0, &bags[1].regions).unwrap();
        assert!(pp >= 0.9, "positive bag {pp}");
        assert!(pn <= 0.1, "negative bag {pn}");
        let h = &report.loss_history[0];
        assert!(h.last().unwrap() < h.first().unwrap());
    }

    #[test]
    fn all_negative_word_skipped() {
        let bags = vec![bag("a", vec![vec![1.0]], &["dog"]), bag("b", vec![vec![-1.0]], &[])];
        let vocab = Vocabulary::from_words(&["dog", "zebra"]);
        let (m, report) = train_mil(&bags, &vocab, &MilConfig::default()).unwrap();
        assert_eq!(report.skipped, vec![("zebra".to_string(), SkipReason::NoPositiveBags)]);
        assert!(!m.detectors[1].trained);
        assert!(m.detectors[1].bias.is_finite());
    }

    #[test]
    fn init_is_base_rate_logit() {
        let bags = vec![
            bag("a", vec![vec![1.0]], &["dog"]),
            bag("b", vec![vec![-1.0]], &[]),
            bag("c", vec![vec![0.0]], &[]),
            bag("d", vec![vec![0.5]], &[]),
        ];
        let vocab = Vocabulary::from_words(&["dog"]);
        let cfg = MilConfig { epochs: 0, ..Default::default() };
        let (m, _) = train_mil(&bags, &vocab, &cfg).unwrap();
        assert!((m.detectors[0].bias - logit(0.25)).abs() < 1e-15);
        assert!(m.detectors[0].weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let bags = vec![bag("a", vec![vec![1.0]], &["dog"]), bag("b", vec![vec![-1.0, 2.0]], &[])];
        let vocab = Vocabulary::from_words(&["dog"]);
        assert!(matches!(train_mil(&bags, &vocab, &MilConfig::default()), Err(MilError::Dimension { .. })));
    }

    #[test]
    fn diverging_rate_reports_word() {
        let bags = vec![bag("a", vec![vec![1e200]], &["dog"]), bag("b", vec![vec![-1e200]], &[])];
        let vocab = Vocabulary::from_words(&["dog"]);
        let cfg = MilConfig { learning_rate: 1e200, epochs: 5, ..Default::default() };
        match train_mil(&bags, &vocab, &cfg) {
            Err(MilError::Diverged { word, .. }) => assert_eq!(word, "dog"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
