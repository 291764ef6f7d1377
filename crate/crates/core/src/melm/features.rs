use serde::{Deserialize, Serialize};

use crate::corpus::Token;
use crate::util::Fnv64;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Template {
    Attribute,
    NGramPlus,
    NGramMinus,
    End,
    Score,
}

/// Feature identity. N-gram templates carry the n-gram ending at the
/// candidate, `End` carries the candidate, `Attribute` and `Score` nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FeatureKey {
    pub template: Template,
    len: u8,
    tokens: [Token; MAX_ORDER],
}

impl FeatureKey {
    pub fn bare(template: Template) -> Self {
        FeatureKey { template, len: 0, tokens: [Token(0); MAX_ORDER] }
    }

    pub fn with_payload(template: Template, payload: &[Token]) -> Self {
        assert!(payload.len() <= MAX_ORDER, "payload longer than {MAX_ORDER}");
        let mut tokens = [Token(0); MAX_ORDER];
        tokens[..payload.len()].copy_from_slice(payload);
        FeatureKey { template, len: payload.len() as u8, tokens }
    }

    pub fn payload(&self) -> &[Token] {
        &self.tokens[..self.len as usize]
    }

    /// Slot in a table of `2^bits` entries.
    pub fn slot(&self, bits: u32) -> u32 {
        let mut h = Fnv64::new();
        h.write(&[self.template as u8, self.len]);
        for t in self.payload() {
            h.write_u32(t.0);
        }
        (h.finish() & ((1u64 << bits) - 1)) as u32
    }
}

/// Unused detected words with their detector scores, plus the words so far.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    history: Vec<Token>,
    /// Sorted by token, no duplicates.
    remaining: Vec<(Token, f64)>,
}

impl LmState {
    /// Fresh state after `<s>`. Duplicate detections keep the first score.
    pub fn new(detections: &[(Token, f64)]) -> Self {
        let mut remaining: Vec<(Token, f64)> = Vec::with_capacity(detections.len());
        for &(t, s) in detections {
            if !t.is_boundary() && !remaining.iter().any(|(r, _)| *r == t) {
                remaining.push((t, s));
            }
        }
        remaining.sort_by_key(|(t, _)| *t);
        LmState { history: vec![Token::START], remaining }
    }

    pub fn history(&self) -> &[Token] {
        &self.history
    }

    pub fn last(&self) -> Token {
        *self.history.last().expect("history starts with <s>")
    }

    pub fn remaining(&self) -> &[(Token, f64)] {
        &self.remaining
    }

    pub fn remaining_score(&self, t: Token) -> Option<f64> {
        self.remaining.binary_search_by_key(&t, |(r, _)| *r).ok().map(|i| self.remaining[i].1)
    }

    pub fn is_remaining(&self, t: Token) -> bool {
        self.remaining_score(t).is_some()
    }

    /// Successor state after generating `t`; consumes `t` from the
    /// remaining set if present.
    pub fn advance(&self, t: Token) -> LmState {
        let mut next = self.clone();
        next.push(t);
        next
    }

    pub fn push(&mut self, t: Token) {
        self.history.push(t);
        if let Ok(i) = self.remaining.binary_search_by_key(&t, |(r, _)| *r) {
            self.remaining.remove(i);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_max: usize,
    pub use_score: bool,
    /// Detector scores are floored here before taking the log.
    pub score_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { n_max: MAX_ORDER, use_score: true, score_floor: 1e-6 }
    }
}

/// Active features (key, value) for predicting `candidate` from `state`.
pub fn extract_features(state: &LmState, candidate: Token, config: &FeatureConfig) -> Vec<(FeatureKey, f64)> {
    let mut out = Vec::with_capacity(config.n_max + 3);
    let score = state.remaining_score(candidate);
    let in_set = score.is_some();
    if in_set {
        out.push((FeatureKey::bare(Template::Attribute), 1.0));
    }
    let hist = state.history();
    let template = if in_set { Template::NGramPlus } else { Template::NGramMinus };
    let mut gram = [Token(0); MAX_ORDER];
    for n in 1..=config.n_max.min(MAX_ORDER) {
        if n - 1 > hist.len() {
            break;
        }
        gram[..n - 1].copy_from_slice(&hist[hist.len() - (n - 1)..]);
        gram[n - 1] = candidate;
        out.push((FeatureKey::with_payload(template, &gram[..n]), 1.0));
    }
    if state.remaining.is_empty() {
        out.push((FeatureKey::with_payload(Template::End, &[candidate]), 1.0));
    }
    if let (Some(s), true) = (score, config.use_score) {
        out.push((FeatureKey::bare(Template::Score), s.max(config.score_floor).ln()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Token = Token(0);
    const CAT: Token = Token(1);
    const DOG: Token = Token(2);

    #[test]
    fn attribute_word_in_set() {
        let st = LmState::new(&[(CAT, 0.8)]).advance(A);
        let f = extract_features(&st, CAT, &FeatureConfig::default());
        let keys: Vec<_> = f.iter().map(|(k, _)| *k).collect();
        assert_eq!(
            keys,
            vec![
                FeatureKey::bare(Template::Attribute),
                FeatureKey::with_payload(Template::NGramPlus, &[CAT]),
                FeatureKey::with_payload(Template::NGramPlus, &[A, CAT]),
                FeatureKey::with_payload(Template::NGramPlus, &[Token::START, A, CAT]),
                FeatureKey::bare(Template::Score),
            ]
        );
        assert_eq!(f[0].1, 1.0);
        assert!((f[4].1 - 0.8f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn end_with_empty_set() {
        let st = LmState::new(&[]).advance(A).advance(CAT);
        let f = extract_features(&st, Token::END, &FeatureConfig::default());
        let keys: Vec<_> = f.iter().map(|(k, _)| *k).collect();
        assert_eq!(
            keys,
            vec![
                FeatureKey::with_payload(Template::NGramMinus, &[Token::END]),
                FeatureKey::with_payload(Template::NGramMinus, &[CAT, Token::END]),
                FeatureKey::with_payload(Template::NGramMinus, &[A, CAT, Token::END]),
                FeatureKey::with_payload(Template::NGramMinus, &[Token::START, A, CAT, Token::END]),
                FeatureKey::with_payload(Template::End, &[Token::END]),
            ]
        );
    }

    #[test]
    fn word_outside_set_only_minus() {
        let st = LmState::new(&[(DOG, 0.9)]);
        let f = extract_features(&st, CAT, &FeatureConfig::default());
        assert!(f.iter().all(|(k, _)| k.template == Template::NGramMinus));
        assert_eq!(f.len(), 2);
    }

    #[test]
    fn score_is_floored() {
        let st = LmState::new(&[(DOG, 0.0)]);
        let f = extract_features(&st, DOG, &FeatureConfig::default());
        let s = f.iter().find(|(k, _)| k.template == Template::Score).unwrap().1;
        assert!((s - 1e-6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn advance_consumes_exactly_the_generated_word() {
        let st = LmState::new(&[(CAT, 0.5), (DOG, 0.4)]);
        let after_cat = st.advance(CAT);
        assert_eq!(after_cat.remaining(), &[(DOG, 0.4)]);
        let after_a = st.advance(A);
        assert_eq!(after_a.remaining(), st.remaining());
    }

    #[test]
    fn slots_are_deterministic() {
        let k = FeatureKey::with_payload(Template::NGramPlus, &[A, CAT]);
        assert_eq!(k.slot(22), k.slot(22));
        assert!(k.slot(4) < 16);
        let other = FeatureKey::with_payload(Template::NGramMinus, &[A, CAT]);
        assert_ne!(k.slot(22), other.slot(22));
    }
}
