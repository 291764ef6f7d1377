//! Deep multimodal similarity model.
//!
//! Two towers map an image feature vector and a caption into the same
//! `d_sem`-dimensional space; relevance is their cosine. The text tower
//! turns each word into a letter-trigram count vector, applies a window-3
//! convolution with tanh, max-pools over positions and finishes with two
//! tanh layers. The image tower is three tanh layers.

mod net;
mod train;
mod trigram;

pub use net::{Dense, Tower};
pub use train::{train_dmsm, DmsmPair, DmsmTrainConfig, DmsmTrainReport};
pub use trigram::{letter_trigram_vector, SparseVec, TrigramIndex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{dot, log_sum_exp, substream};

pub const DMSM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum DmsmError {
    #[error("input dimension {found} does not match tower input {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("caption has no tokens")]
    EmptyCaption,
    #[error("non-finite loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error("need at least {needed} non-matching captions per pair, found {found}")]
    InsufficientNegatives { needed: usize, found: usize },
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmsmConfig {
    pub d_sem: usize,
    pub conv_channels: usize,
    pub text_hidden: usize,
    pub image_hidden: usize,
    pub gamma: f64,
    pub negatives: usize,
    pub overflow_buckets: usize,
    pub seed: u64,
}

impl Default for DmsmConfig {
    fn default() -> Self {
        DmsmConfig {
            d_sem: 32,
            conv_channels: 64,
            text_hidden: 64,
            image_hidden: 64,
            gamma: 10.0,
            negatives: 50,
            overflow_buckets: 64,
            seed: 0,
        }
    }
}

/// Trainable parameters of both towers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmsmParams {
    pub image: Tower,
    pub conv: Dense,
    pub text: Tower,
}

impl DmsmParams {
    pub fn zeros_like(&self) -> Self {
        DmsmParams { image: self.image.zeros_like(), conv: self.conv.zeros_like(), text: self.text.zeros_like() }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.image.layers.iter().chain(std::iter::once(&self.conv)).chain(self.text.layers.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.image.layers.iter_mut().chain(std::iter::once(&mut self.conv)).chain(self.text.layers.iter_mut())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers().flat_map(|l| l.params().copied()).collect()
    }

    pub fn assign(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        for l in self.layers_mut() {
            for p in l.params_mut() {
                *p = *it.next().expect("flat parameter vector too short");
            }
        }
        assert!(it.next().is_none(), "flat parameter vector too long");
    }

    /// `self -= rate * grad`
    pub fn step(&mut self, grad: &DmsmParams, rate: f64) {
        for (l, g) in self.layers_mut().zip(grad.layers()) {
            for (p, d) in l.params_mut().zip(g.params()) {
                *p -= rate * d;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmsmModel {
    pub version: u32,
    pub trigrams: TrigramIndex,
    pub params: DmsmParams,
    pub gamma: f64,
    pub negatives: usize,
}

pub(crate) struct TextCache {
    inputs: Vec<SparseVec>,
    conv_out: Vec<Vec<f64>>,
    argmax: Vec<usize>,
    acts: Vec<Vec<f64>>,
}

impl TextCache {
    pub(crate) fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

impl DmsmModel {
    /// Randomly initialized model; the trigram space comes from `words`.
    pub fn new<'a>(config: &DmsmConfig, image_dim: usize, words: impl IntoIterator<Item = &'a str>) -> Result<Self, DmsmError> {
        if config.gamma <= 0.0 || !config.gamma.is_finite() {
            return Err(DmsmError::Config(format!("gamma must be positive, got {}", config.gamma)));
        }
        if config.negatives == 0 {
            return Err(DmsmError::Config("negatives must be at least 1".into()));
        }
        if [config.d_sem, config.conv_channels, config.text_hidden, config.image_hidden, image_dim].contains(&0) {
            return Err(DmsmError::Config("layer dimensions must be positive".into()));
        }
        let trigrams = TrigramIndex::build(words, config.overflow_buckets);
        let mut rng = substream(config.seed, "dmsm-init");
        let image = Tower {
            layers: vec![
                Dense::random(image_dim, config.image_hidden, &mut rng),
                Dense::random(config.image_hidden, config.image_hidden, &mut rng),
                Dense::random(config.image_hidden, config.d_sem, &mut rng),
            ],
        };
        let conv = Dense::random(3 * trigrams.dim(), config.conv_channels, &mut rng);
        let text = Tower {
            layers: vec![
                Dense::random(config.conv_channels, config.text_hidden, &mut rng),
                Dense::random(config.text_hidden, config.d_sem, &mut rng),
            ],
        };
        Ok(DmsmModel { version: DMSM_FORMAT_VERSION, trigrams, params: DmsmParams { image, conv, text }, gamma: config.gamma, negatives: config.negatives })
    }

    pub fn from_parts(trigrams: TrigramIndex, params: DmsmParams, gamma: f64, negatives: usize) -> Self {
        assert_eq!(params.conv.inp, 3 * trigrams.dim(), "conv input must span three trigram windows");
        assert_eq!(params.image.output_dim(), params.text.output_dim(), "tower outputs differ");
        DmsmModel { version: DMSM_FORMAT_VERSION, trigrams, params, gamma, negatives }
    }

    pub fn d_sem(&self) -> usize {
        self.params.image.output_dim()
    }

    pub fn image_dim(&self) -> usize {
        self.params.image.input_dim()
    }

    pub fn embed_image(&self, feature: &[f64]) -> Result<Vec<f64>, DmsmError> {
        if feature.len() != self.image_dim() {
            return Err(DmsmError::Dimension { expected: self.image_dim(), found: feature.len() });
        }
        Ok(self.params.image.forward_all(feature).pop().unwrap())
    }

    pub fn embed_text<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<f64>, DmsmError> {
        Ok(self.text_forward(tokens)?.acts.pop().unwrap())
    }

    pub fn embed_texts<S: AsRef<str>>(&self, captions: &[Vec<S>]) -> Result<Vec<Vec<f64>>, DmsmError> {
        captions.iter().map(|c| self.embed_text(c)).collect()
    }

    pub(crate) fn text_forward<S: AsRef<str>>(&self, tokens: &[S]) -> Result<TextCache, DmsmError> {
        if tokens.is_empty() {
            return Err(DmsmError::EmptyCaption);
        }
        let d = self.trigrams.dim();
        let words: Vec<SparseVec> = tokens.iter().map(|t| self.trigrams.encode(t.as_ref())).collect();
        let mut inputs = Vec::with_capacity(words.len());
        for t in 0..words.len() {
            let mut x = SparseVec::new();
            if t > 0 {
                x.extend(words[t - 1].iter().copied());
            }
            x.extend(words[t].iter().map(|&(i, v)| (i + d, v)));
            if t + 1 < words.len() {
                x.extend(words[t + 1].iter().map(|&(i, v)| (i + 2 * d, v)));
            }
            inputs.push(x);
        }
        let conv_out: Vec<Vec<f64>> = inputs.iter().map(|x| self.params.conv.forward_sparse(x)).collect();
        let channels = self.params.conv.out;
        let mut argmax = vec![0; channels];
        let mut pooled = conv_out[0].clone();
        for (t, h) in conv_out.iter().enumerate().skip(1) {
            for c in 0..channels {
                if h[c] > pooled[c] {
                    pooled[c] = h[c];
                    argmax[c] = t;
                }
            }
        }
        let acts = self.params.text.forward_all(&pooled);
        Ok(TextCache { inputs, conv_out, argmax, acts })
    }

    pub(crate) fn text_backward(&self, cache: &TextCache, dy: &[f64], grad: &mut DmsmParams) {
        let dpooled = self.params.text.backward(&cache.acts, dy, &mut grad.text);
        let channels = self.params.conv.out;
        let mut dconv = vec![vec![0.0; channels]; cache.inputs.len()];
        for c in 0..channels {
            dconv[cache.argmax[c]][c] += dpooled[c];
        }
        for (t, d) in dconv.iter().enumerate() {
            if d.iter().any(|&v| v != 0.0) {
                self.params.conv.backward_sparse(&cache.inputs[t], &cache.conv_out[t], d, &mut grad.conv);
            }
        }
    }

    /// Cosine relevance between an image and a caption; the re-ranking feature.
    pub fn score<S: AsRef<str>>(&self, feature: &[f64], tokens: &[S]) -> Result<f64, DmsmError> {
        relevance(&self.embed_image(feature)?, &self.embed_text(tokens)?)
    }

    /// `P(D+ | Q)` against the given non-matching captions.
    pub fn posterior<S: AsRef<str>>(&self, feature: &[f64], positive: &[S], negatives: &[Vec<S>]) -> Result<f64, DmsmError> {
        let q = self.embed_image(feature)?;
        let mut rs = vec![relevance(&q, &self.embed_text(positive)?)?];
        for n in negatives {
            rs.push(relevance(&q, &self.embed_text(n)?)?);
        }
        Ok(posterior(self.gamma, &rs))
    }
}

/// Cosine similarity.
pub fn relevance(q: &[f64], d: &[f64]) -> Result<f64, DmsmError> {
    if q.len() != d.len() {
        return Err(DmsmError::Dimension { expected: q.len(), found: d.len() });
    }
    let nq = dot(q, q).sqrt();
    let nd = dot(d, d).sqrt();
    if nq == 0.0 || nd == 0.0 {
        return Err(DmsmError::ZeroVector);
    }
    Ok(dot(q, d) / (nq * nd))
}

/// Softmax weight of the first relevance under smoothing `gamma`.
pub fn posterior(gamma: f64, relevances: &[f64]) -> f64 {
    let logits: Vec<f64> = relevances.iter().map(|r| gamma * r).collect();
    (logits[0] - log_sum_exp(&logits)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relevance_examples() {
        assert!((relevance(&[0.3, -1.2], &[0.3, -1.2]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(relevance(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((relevance(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(relevance(&[0.0, 0.0], &[1.0, 1.0]), Err(DmsmError::ZeroVector));
    }

    #[test]
    fn posterior_examples() {
        assert!((posterior(10.0, &[0.4; 51]) - 1.0 / 51.0).abs() < 1e-15);
        let e10 = 10f64.exp();
        assert!((posterior(10.0, &[1.0, 0.0]) - e10 / (e10 + 1.0)).abs() < 1e-15);
        assert!((posterior(0.0, &[0.9, -0.3, 0.1]) - 1.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn relevance_scale_invariant(
            q in prop::collection::vec(-3.0f64..3.0, 4),
            d in prop::collection::vec(-3.0f64..3.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(dot(&q, &q) > 1e-6 && dot(&d, &d) > 1e-6);
            let r = relevance(&q, &d).unwrap();
            let qs: Vec<f64> = q.iter().map(|x| a * x).collect();
            let ds: Vec<f64> = d.iter().map(|x| b * x).collect();
            prop_assert!((relevance(&qs, &ds).unwrap() - r).abs() < 1e-12);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        }

        #[test]
        fn posterior_normalized_and_shift_invariant(rs in prop::collection::vec(-1.0f64..1.0, 2..8), shift in -1.0f64..1.0, gamma in 0.1f64..20.0) {
            let total: f64 = (0..rs.len()).map(|i| {
                let mut r = rs.clone();
                r.swap(0, i);
                posterior(gamma, &r)
            }).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let shifted: Vec<f64> = rs.iter().map(|r| r + shift).collect();
            prop_assert!((posterior(gamma, &shifted) - posterior(gamma, &rs)).abs() < 1e-12);
        }

        #[test]
        fn posterior_ranks_like_relevance(a in -1.0f64..1.0, b in -1.0f64..1.0, rest in prop::collection::vec(-1.0f64..1.0, 1..5), gamma in 0.1f64..20.0) {
            let mut ra = vec![a, b];
            ra.extend(&rest);
            let mut rb = vec![b, a];
            rb.extend(&rest);
            let (pa, pb) = (posterior(gamma, &ra), posterior(gamma, &rb));
            if a > b { prop_assert!(pa >= pb); }
            if b > a { prop_assert!(pb >= pa); }
        }
    }

    fn scalar_tower(weights: &[f64]) -> Tower {
        Tower { layers: weights.iter().map(|&w| Dense::new(1, 1, vec![w], vec![0.0])).collect() }
    }

    #[test]
    fn image_tower_scalar_chain() {
        let trig = TrigramIndex::build(["a"], 0);
        let params = DmsmParams {
            image: scalar_tower(&[1.0, 1.0, 1.0]),
            conv: Dense::zeros(3, 1),
            text: scalar_tower(&[1.0, 1.0]),
        };
        let m = DmsmModel::from_parts(trig, params, 10.0, 1);
        let y = m.embed_image(&[0.5]).unwrap();
        assert_eq!(y, vec![0.5f64.tanh().tanh().tanh()]);
        assert_eq!(m.embed_image(&[0.5, 1.0]), Err(DmsmError::Dimension { expected: 1, found: 2 }));
    }

    #[test]
    fn zero_weights_collapse_to_bias() {
        let trig = TrigramIndex::build(["a"], 0);
        let mut image = Tower { layers: vec![Dense::zeros(2, 2), Dense::zeros(2, 2), Dense::zeros(2, 2)] };
        for l in &mut image.layers {
            l.b = vec![0.3, -0.7];
        }
        let params = DmsmParams { image, conv: Dense::zeros(3, 1), text: Tower { layers: vec![Dense::zeros(1, 2), Dense::zeros(2, 2)] } };
        let m = DmsmModel::from_parts(trig, params, 10.0, 1);
        let y = m.embed_image(&[5.0, -9.0]).unwrap();
        assert_eq!(y, vec![0.3f64.tanh(), (-0.7f64).tanh()]);
    }

    /// Trigram space {#a#, #b#} (one trigram per word), one conv channel,
    /// scalar dense layers.
    fn tiny_text_model() -> DmsmModel {
        let trig = TrigramIndex::build(["a", "b"], 0);
        assert_eq!(trig.dim(), 2);
        // conv input = [prev(#a#,#b#), cur(#a#,#b#), next(#a#,#b#)]
        let conv = Dense::new(6, 1, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6], vec![0.05]);
        let text = Tower { layers: vec![Dense::new(1, 1, vec![2.0], vec![0.0]), Dense::new(1, 1, vec![-1.5], vec![0.1])] };
        let image = scalar_tower(&[1.0, 1.0, 1.0]);
        DmsmModel::from_parts(trig, DmsmParams { image, conv, text }, 10.0, 1)
    }

    #[test]
    fn text_forward_by_hand() {
        let m = tiny_text_model();
        // caption [a, b]
        // pos 0: cur=a (0.3), next=b (0.6) → tanh(0.05 + 0.3 + 0.6)
        // pos 1: prev=a (0.1), cur=b (-0.4) → tanh(0.05 + 0.1 - 0.4)
        let h0 = (0.05f64 + 0.3 + 0.6).tanh();
        let h1 = (0.05f64 + 0.1 - 0.4).tanh();
        let pooled = h0.max(h1);
        let want = (-1.5 * (2.0 * pooled).tanh() + 0.1).tanh();
        let y = m.embed_text(&["a", "b"]).unwrap();
        assert_eq!(y.len(), 1);
        assert!((y[0] - want).abs() < 1e-15);
    }

    #[test]
    fn single_token_pooling_is_identity() {
        let m = tiny_text_model();
        let h = (0.05f64 + 0.3).tanh();
        let want = (-1.5 * (2.0 * h).tanh() + 0.1).tanh();
        assert!((m.embed_text(&["a"]).unwrap()[0] - want).abs() < 1e-15);
        assert_eq!(m.embed_text::<&str>(&[]), Err(DmsmError::EmptyCaption));
    }

    #[test]
    fn word_order_matters() {
        let cfg = DmsmConfig { d_sem: 4, conv_channels: 6, text_hidden: 5, image_hidden: 3, ..Default::default() };
        let m = DmsmModel::new(&cfg, 3, ["dog", "runs", "fast"]).unwrap();
        let a = m.embed_text(&["dog", "runs", "fast"]).unwrap();
        let b = m.embed_text(&["fast", "runs", "dog"]).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, m.embed_text(&["dog", "runs", "fast"]).unwrap());
        let batch = m.embed_texts(&[vec!["dog", "runs", "fast"], vec!["fast", "runs", "dog"]]).unwrap();
        assert_eq!(batch, vec![a, b]);
    }
}
