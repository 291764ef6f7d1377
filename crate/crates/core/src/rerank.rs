//! Sentence-level re-ranking of M-best lists and MERT weight tuning.
//!
//! Every candidate gets a fixed 16-dimensional feature vector; the chosen
//! caption is the argmax of a linear score, with ties going to the earlier
//! M-best rank. [`mert_optimize`] tunes the weights by coordinate-wise exact
//! line search on corpus BLEU.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::Hypothesis;
use crate::metrics::BleuStats;
use crate::util::substream;

pub const NUM_FEATURES: usize = 16;
pub const MAX_MENTIONS: usize = 10;
pub const DMSM_INDEX: usize = 15;
pub const WEIGHTS_VERSION: u32 = 1;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "log_likelihood",
    "length",
    "log_prob_per_word",
    "log_rank",
    "mentions_0",
    "mentions_1",
    "mentions_2",
    "mentions_3",
    "mentions_4",
    "mentions_5",
    "mentions_6",
    "mentions_7",
    "mentions_8",
    "mentions_9",
    "mentions_10",
    "dmsm",
];

#[derive(Debug, Error, PartialEq)]
pub enum RerankError {
    #[error("sentence has no words")]
    EmptySentence,
    #[error("ranks start at 1")]
    ZeroRank,
    #[error("empty candidate list{}", .0.map(|i| format!(" for image {i}")).unwrap_or_default())]
    EmptyList(Option<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{candidates} candidates but {stats} BLEU statistics for image {image}")]
    Misaligned { image: usize, candidates: usize, stats: usize },
    #[error("unknown weight name `{0}`")]
    UnknownWeight(String),
    #[error("weights file version {0} is not supported")]
    Version(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceFeatures {
    pub log_likelihood: f64,
    pub length: f64,
    pub log_prob_per_word: f64,
    pub log_rank: f64,
    /// `mention_indicators[k]` is set iff the sentence mentions `k` detected
    /// words (10 or more clamp to the last one).
    pub mention_indicators: [bool; MAX_MENTIONS + 1],
    pub dmsm_score: f64,
}

impl SentenceFeatures {
    pub fn to_vector(&self) -> [f64; NUM_FEATURES] {
        let mut v = [0.0; NUM_FEATURES];
        v[0] = self.log_likelihood;
        v[1] = self.length;
        v[2] = self.log_prob_per_word;
        v[3] = self.log_rank;
        for (k, &on) in self.mention_indicators.iter().enumerate() {
            v[4 + k] = if on { 1.0 } else { 0.0 };
        }
        v[DMSM_INDEX] = self.dmsm_score;
        v
    }

    pub fn mentions(&self) -> usize {
        self.mention_indicators.iter().position(|&b| b).unwrap_or(0)
    }
}

/// Table of features for one sentence. `rank` is the 1-based M-best rank.
pub fn sentence_features(
    log_likelihood: f64,
    length: usize,
    mentions: usize,
    rank: usize,
    dmsm_score: f64,
) -> Result<SentenceFeatures, RerankError> {
    if length == 0 {
        return Err(RerankError::EmptySentence);
    }
    if rank == 0 {
        return Err(RerankError::ZeroRank);
    }
    if !log_likelihood.is_finite() || !dmsm_score.is_finite() {
        return Err(RerankError::NonFinite("sentence features"));
    }
    let mut mention_indicators = [false; MAX_MENTIONS + 1];
    mention_indicators[mentions.min(MAX_MENTIONS)] = true;
    Ok(SentenceFeatures {
        log_likelihood,
        length: length as f64,
        log_prob_per_word: log_likelihood / length as f64,
        log_rank: (rank as f64).ln(),
        mention_indicators,
        dmsm_score,
    })
}

/// Features of a decoded hypothesis at `rank`.
pub fn hypothesis_features(hyp: &Hypothesis, rank: usize, dmsm_score: f64) -> Result<SentenceFeatures, RerankError> {
    sentence_features(hyp.log_score, hyp.words().len(), hyp.coverage(), rank, dmsm_score)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MertWeights(pub [f64; NUM_FEATURES]);

#[derive(Serialize, Deserialize)]
struct WeightsRecord {
    version: u32,
    weights: Vec<NamedWeight>,
}

#[derive(Serialize, Deserialize)]
struct NamedWeight {
    name: String,
    value: f64,
}

impl MertWeights {
    pub fn zeros() -> Self {
        MertWeights([0.0; NUM_FEATURES])
    }

    /// Unit weight on the log-likelihood: re-ranking keeps the decoder order.
    pub fn baseline() -> Self {
        let mut w = Self::zeros();
        w.0[0] = 1.0;
        w
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        FEATURE_NAMES.iter().position(|n| *n == name).map(|i| self.0[i])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|w| w.is_finite())
    }
}

impl Default for MertWeights {
    fn default() -> Self {
        Self::baseline()
    }
}

impl Serialize for MertWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WeightsRecord {
            version: WEIGHTS_VERSION,
            weights: FEATURE_NAMES.iter().zip(self.0).map(|(n, v)| NamedWeight { name: n.to_string(), value: v }).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MertWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let rec = WeightsRecord::deserialize(d)?;
        if rec.version != WEIGHTS_VERSION {
            return Err(D::Error::custom(RerankError::Version(rec.version)));
        }
        let mut w = MertWeights::zeros();
        let mut seen = [false; NUM_FEATURES];
        for nw in rec.weights {
            let i = FEATURE_NAMES
                .iter()
                .position(|n| *n == nw.name)
                .ok_or_else(|| D::Error::custom(RerankError::UnknownWeight(nw.name.clone())))?;
            if !nw.value.is_finite() {
                return Err(D::Error::custom(RerankError::NonFinite("weights")));
            }
            w.0[i] = nw.value;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(D::Error::custom(format!("missing weight `{}`", FEATURE_NAMES[i])));
        }
        Ok(w)
    }
}

pub fn linear_score(weights: &MertWeights, features: &[f64; NUM_FEATURES]) -> f64 {
    weights.0.iter().zip(features).map(|(w, f)| w * f).sum()
}

/// Index of the best-scoring candidate; ties go to the earlier one.
pub fn rerank(candidates: &[[f64; NUM_FEATURES]], weights: &MertWeights) -> Result<usize, RerankError> {
    if candidates.is_empty() {
        return Err(RerankError::EmptyList(None));
    }
    let mut best = 0;
    let mut best_score = linear_score(weights, &candidates[0]);
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let s = linear_score(weights, c);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

/// One image's M-best list: a feature vector and the BLEU statistics
/// against the image's references for every candidate, in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct MertImage {
    pub features: Vec<[f64; NUM_FEATURES]>,
    pub stats: Vec<BleuStats>,
}

impl MertImage {
    pub fn new<S: AsRef<str>, R: AsRef<str>>(
        features: Vec<[f64; NUM_FEATURES]>,
        sentences: &[Vec<S>],
        references: &[Vec<R>],
    ) -> Self {
        let stats = sentences.iter().map(|s| BleuStats::sentence(s, references)).collect();
        MertImage { features, stats }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MertConfig {
    pub restarts: usize,
    /// A full sweep gaining less than this ends a run.
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for MertConfig {
    fn default() -> Self {
        MertConfig { restarts: 8, tolerance: 1e-6, max_sweeps: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MertReport {
    pub initial_bleu: f64,
    pub final_bleu: f64,
    /// Final BLEU of the run from the initial weights, then of each restart.
    pub run_bleu: Vec<f64>,
}

/// Corpus BLEU-4 of the candidates `weights` selects.
pub fn corpus_bleu(images: &[MertImage], weights: &MertWeights) -> f64 {
    let mut total = BleuStats::default();
    for img in images {
        if let Ok(i) = rerank(&img.features, weights) {
            total += img.stats[i];
        }
    }
    total.bleu(4)
}

/// The winning candidate along `a_c + b_c·x` as `x` grows: the first entry
/// wins on `(-∞, x_1)`, the next from `x_1`, and so on.
fn upper_envelope(a: &[f64], b: &[f64]) -> Vec<(f64, usize)> {
    // winner at -∞: smallest slope, then largest intercept, then earliest
    let mut cur = 0;
    for j in 1..a.len() {
        if b[j] < b[cur] || (b[j] == b[cur] && a[j] > a[cur]) {
            cur = j;
        }
    }
    let mut out = vec![(f64::NEG_INFINITY, cur)];
    let mut x0 = f64::NEG_INFINITY;
    loop {
        let mut next: Option<(f64, usize)> = None;
        for j in 0..a.len() {
            if b[j] <= b[cur] {
                continue;
            }
            let x = (a[cur] - a[j]) / (b[j] - b[cur]);
            if x < x0 || !x.is_finite() {
                continue;
            }
            let better = match next {
                None => true,
                Some((nx, nj)) => x < nx || (x == nx && (b[j] > b[nj] || (b[j] == b[nj] && (a[j] > a[nj] || (a[j] == a[nj] && j < nj))))),
            };
            if better {
                next = Some((x, j));
            }
        }
        match next {
            Some((x, j)) => {
                out.push((x, j));
                x0 = x;
                cur = j;
            }
            None => return out,
        }
    }
}

fn winner_at(env: &[(f64, usize)], x: f64) -> usize {
    let k = env.partition_point(|&(bx, _)| bx <= x);
    env[k.max(1) - 1].1
}

/// Best value of weight `dim` with the others fixed, as `(x, bleu)`.
fn line_search(images: &[MertImage], w: &MertWeights, dim: usize) -> Option<(f64, f64)> {
    let envelopes: Vec<Vec<(f64, usize)>> = images
        .par_iter()
        .map(|img| {
            let b: Vec<f64> = img.features.iter().map(|f| f[dim]).collect();
            let a: Vec<f64> = img.features.iter().map(|f| linear_score(w, f) - w.0[dim] * f[dim]).collect();
            upper_envelope(&a, &b)
        })
        .collect();
    let mut points: Vec<f64> = envelopes.iter().flat_map(|e| e[1..].iter().map(|p| p.0)).collect();
    if points.is_empty() {
        return None;
    }
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut probes = Vec::with_capacity(points.len() + 1);
    probes.push(points[0] - 1.0);
    probes.extend(points.windows(2).map(|p| 0.5 * (p[0] + p[1])));
    probes.push(points[points.len() - 1] + 1.0);

    let mut best: Option<(f64, f64)> = None;
    for x in probes {
        let mut total = BleuStats::default();
        for (img, env) in images.iter().zip(&envelopes) {
            total += img.stats[winner_at(env, x)];
        }
        let bleu = total.bleu(4);
        // prefer the smallest move among equal scores
        let better = match best {
            None => true,
            Some((bx, bb)) => bleu > bb || (bleu == bb && (x - w.0[dim]).abs() < (bx - w.0[dim]).abs()),
        };
        if better {
            best = Some((x, bleu));
        }
    }
    best
}

/// Coordinate ascent from `start`; only strict corpus-BLEU gains are accepted.
fn ascend(images: &[MertImage], start: MertWeights, config: &MertConfig) -> (MertWeights, f64) {
    let mut w = start;
    let mut bleu = corpus_bleu(images, &w);
    for _ in 0..config.max_sweeps {
        let sweep_start = bleu;
        for dim in 0..NUM_FEATURES {
            let Some((x, _)) = line_search(images, &w, dim) else { continue };
            let mut trial = w;
            trial.0[dim] = x;
            // the envelope is only a guide; the direct argmax decides
            let b = corpus_bleu(images, &trial);
            if b > bleu + 1e-12 {
                w = trial;
                bleu = b;
            }
        }
        if bleu - sweep_start < config.tolerance {
            break;
        }
    }
    (w, bleu)
}

/// Tunes re-ranking weights for corpus BLEU-4 on `images`. Never returns
/// weights scoring below `init`.
pub fn mert_optimize(
    images: &[MertImage],
    init: &MertWeights,
    config: &MertConfig,
) -> Result<(MertWeights, MertReport), RerankError> {
    for (i, img) in images.iter().enumerate() {
        if img.features.is_empty() {
            return Err(RerankError::EmptyList(Some(i)));
        }
        if img.features.len() != img.stats.len() {
            return Err(RerankError::Misaligned { image: i, candidates: img.features.len(), stats: img.stats.len() });
        }
        if img.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RerankError::NonFinite("candidate features"));
        }
    }
    if !init.is_finite() {
        return Err(RerankError::NonFinite("initial weights"));
    }
    let initial_bleu = corpus_bleu(images, init);
    let (mut best, mut best_bleu) = ascend(images, *init, config);
    let mut run_bleu = vec![best_bleu];
    let mut rng = substream(config.seed, "mert-restarts");
    for _ in 0..config.restarts {
        let mut start = MertWeights::zeros();
        for v in start.0.iter_mut() {
            *v = rng.gen_range(-1.0..=1.0);
        }
        let (w, b) = ascend(images, start, config);
        run_bleu.push(b);
        if b > best_bleu + 1e-12 {
            best = w;
            best_bleu = b;
        }
    }
    Ok((best, MertReport { initial_bleu, final_bleu: best_bleu, run_bleu }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feat(pairs: &[(usize, f64)]) -> [f64; NUM_FEATURES] {
        let mut f = [0.0; NUM_FEATURES];
        for &(i, v) in pairs {
            f[i] = v;
        }
        f
    }

    #[test]
    fn feature_table_examples() {
        let f = sentence_features(-8.0, 4, 2, 1, 0.3).unwrap();
        assert_eq!((f.log_likelihood, f.length, f.log_prob_per_word, f.log_rank, f.dmsm_score), (-8.0, 4.0, -2.0, 0.0, 0.3));
        assert_eq!(f.mention_indicators.iter().filter(|&&b| b).count(), 1);
        assert!(f.mention_indicators[2]);
        assert_eq!(sentence_features(-1.0, 1, 0, 10, 0.0).unwrap().log_rank, 10f64.ln());
        assert!(sentence_features(-1.0, 1, 13, 1, 0.0).unwrap().mention_indicators[10]);
        assert_eq!(sentence_features(-1.0, 0, 0, 1, 0.0), Err(RerankError::EmptySentence));
        assert_eq!(sentence_features(-1.0, 1, 0, 0, 0.0), Err(RerankError::ZeroRank));
        let v = f.to_vector();
        assert_eq!(v[6], 1.0);
        assert_eq!(v[DMSM_INDEX], 0.3);
        assert_eq!(FEATURE_NAMES[DMSM_INDEX], "dmsm");
    }

    #[test]
    fn linear_score_selectors_and_oracle() {
        let f = sentence_features(-8.0, 4, 2, 3, 0.3).unwrap().to_vector();
        assert_eq!(linear_score(&MertWeights::zeros(), &f), 0.0);
        let mut w = MertWeights::zeros();
        w.0[DMSM_INDEX] = 1.0;
        assert_eq!(linear_score(&w, &f), 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = MertWeights(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
        let x: [f64; NUM_FEATURES] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let mut oracle = 0.0;
        for i in 0..NUM_FEATURES {
            oracle += w.0[i] * x[i];
        }
        assert!((linear_score(&w, &x) - oracle).abs() < 1e-12);
    }

    #[test]
    fn rerank_rules() {
        let one = [feat(&[(0, -3.0)])];
        assert_eq!(rerank(&one, &MertWeights::baseline()), Ok(0));
        assert_eq!(rerank(&[], &MertWeights::baseline()), Err(RerankError::EmptyList(None)));
        let list = [feat(&[(0, -1.0), (15, 0.1)]), feat(&[(0, -2.0), (15, 0.9)]), feat(&[(0, -1.5), (15, 0.5)])];
        assert_eq!(rerank(&list, &MertWeights::zeros()), Ok(0));
        // -1 + 0.2 = -0.8, -2 + 1.8 = -0.2, -1.5 + 1.0 = -0.5
        let mut w = MertWeights::baseline();
        w.0[DMSM_INDEX] = 2.0;
        assert_eq!(rerank(&list, &w), Ok(1));
        let mut scaled = w;
        scaled.0.iter_mut().for_each(|v| *v *= 7.5);
        assert_eq!(rerank(&list, &scaled), Ok(1));
    }

    #[test]
    fn weights_round_trip_with_names() {
        let mut w = MertWeights::baseline();
        w.0[DMSM_INDEX] = -0.25;
        let json = serde_json::to_string(&w).unwrap();
        assert!(json.contains("\"version\":1"));
        assert!(json.contains("\"name\":\"dmsm\",\"value\":-0.25"));
        let back: MertWeights = serde_json::from_str(&json).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.get("log_likelihood"), Some(1.0));
        let bad = json.replace("\"version\":1", "\"version\":9");
        assert!(serde_json::from_str::<MertWeights>(&bad).is_err());
    }

    #[test]
    fn envelope_matches_direct_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..7);
            // small integer grid forces parallel lines and shared crossings
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-3..=3) as f64).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-2..=2) as f64).collect();
            let env = upper_envelope(&a, &b);
            for k in 0..=80 {
                let x = -10.0 + 0.25 * k as f64 + 0.01;
                let direct = (0..n).fold(0, |best, j| if a[j] + b[j] * x > a[best] + b[best] * x { j } else { best });
                assert_eq!(winner_at(&env, x), direct, "a={a:?} b={b:?} x={x}");
            }
        }
    }

    fn toy_image(hyps: &[&str], refs: &[&str], feats: Vec<[f64; NUM_FEATURES]>) -> MertImage {
        let s: Vec<Vec<&str>> = hyps.iter().map(|h| h.split(' ').collect()).collect();
        let r: Vec<Vec<&str>> = refs.iter().map(|h| h.split(' ').collect()).collect();
        MertImage::new(feats, &s, &r)
    }

    #[test]
    fn identical_candidates_leave_weights() {
        let f = feat(&[(0, -2.0), (1, 3.0)]);
        let img = toy_image(&["a b c", "a b c"], &["a b c"], vec![f, f]);
        let init = MertWeights::baseline();
        let (w, r) = mert_optimize(&[img], &init, &MertConfig::default()).unwrap();
        assert_eq!(w, init);
        assert_eq!(r.final_bleu, r.initial_bleu);
    }

    #[test]
    fn empty_list_rejected() {
        let img = MertImage { features: vec![], stats: vec![] };
        assert_eq!(mert_optimize(&[img], &MertWeights::baseline(), &MertConfig::default()).unwrap_err(), RerankError::EmptyList(Some(0)));
    }
}
