//! Corpus BLEU and a simplified, non-official METEOR.
//!
//! BLEU uses clipped n-gram precision up to 4-grams, +1 smoothing on the
//! match and total counts of every order above one, and a brevity penalty
//! against the reference closest in length (ties go to the shorter one).
//!
//! `meteor_lite` aligns exact matches first, then matches under a small
//! suffix-stripping stemmer (`s`, `es`, `ing`, `ed`, with doubled final
//! consonants undone after `ing`/`ed`). There is no synonym stage, so its
//! numbers are not comparable to official METEOR.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_N: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no hypotheses to score")]
    Empty,
    #[error("hypothesis {0} has no references")]
    NoReferences(usize),
    #[error("{hyps} hypotheses but {refs} reference sets")]
    LengthMismatch { hyps: usize, refs: usize },
}

/// Sufficient statistics of BLEU; they add across sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [u64; MAX_N],
    pub totals: [u64; MAX_N],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, o: Self) {
        for n in 0..MAX_N {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

impl std::ops::SubAssign for BleuStats {
    fn sub_assign(&mut self, o: Self) {
        for n in 0..MAX_N {
            self.matches[n] -= o.matches[n];
            self.totals[n] -= o.totals[n];
        }
        self.hyp_len -= o.hyp_len;
        self.ref_len -= o.ref_len;
    }
}

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, u64> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

impl BleuStats {
    pub fn sentence<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], refs: &[Vec<R>]) -> Self {
        let mut st = BleuStats { hyp_len: hyp.len() as u64, ..Default::default() };
        let hl = hyp.len() as i64;
        st.ref_len = refs
            .iter()
            .map(|r| r.len() as i64)
            .min_by_key(|&l| ((l - hl).abs(), l))
            .unwrap_or(0) as u64;
        for n in 1..=MAX_N {
            let hc = ngram_counts(hyp, n);
            let mut max_ref: HashMap<Vec<&str>, u64> = HashMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            st.totals[n - 1] = hc.values().sum();
            st.matches[n - 1] = hc.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        }
        st
    }

    /// Smoothed precision of order `n` (1-based).
    pub fn precision(&self, n: usize) -> f64 {
        let (m, t) = (self.matches[n - 1] as f64, self.totals[n - 1] as f64);
        if n == 1 {
            if t == 0.0 {
                0.0
            } else {
                m / t
            }
        } else {
            (m + 1.0) / (t + 1.0)
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// BLEU over orders `1..=max_n`.
    pub fn bleu(&self, max_n: usize) -> f64 {
        let bp = self.brevity_penalty();
        if bp == 0.0 || self.matches[0] == 0 {
            return 0.0;
        }
        let log_mean = (1..=max_n).map(|n| self.precision(n).ln()).sum::<f64>() / max_n as f64;
        bp * log_mean.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// BLEU-1 through BLEU-4.
    pub bleu: [f64; MAX_N],
    pub precisions: [f64; MAX_N],
    pub brevity_penalty: f64,
    pub stats: BleuStats,
}

fn check_inputs<S, R>(hyps: &[S], refs: &[Vec<R>]) -> Result<(), MetricsError> {
    if hyps.is_empty() {
        return Err(MetricsError::Empty);
    }
    if hyps.len() != refs.len() {
        return Err(MetricsError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if let Some(i) = refs.iter().position(Vec::is_empty) {
        return Err(MetricsError::NoReferences(i));
    }
    Ok(())
}

pub fn corpus_stats<S: AsRef<str>, R: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<Vec<R>>]) -> Result<BleuStats, MetricsError> {
    check_inputs(hyps, refs)?;
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total += BleuStats::sentence(h, r);
    }
    Ok(total)
}

/// Corpus BLEU of `hyps[i]` against the reference set `refs[i]`.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<Vec<R>>]) -> Result<BleuScore, MetricsError> {
    let stats = corpus_stats(hyps, refs)?;
    let mut b = [0.0; MAX_N];
    let mut p = [0.0; MAX_N];
    for n in 1..=MAX_N {
        b[n - 1] = stats.bleu(n);
        p[n - 1] = stats.precision(n);
    }
    Ok(BleuScore { bleu: b, precisions: p, brevity_penalty: stats.brevity_penalty(), stats })
}

/// Suffix-stripping stemmer used by [`meteor_lite`].
pub fn stem(word: &str) -> String {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    let strip = |k: usize| -> Option<Vec<char>> { (n >= k + 2).then(|| chars[..n - k].to_vec()) };
    let undouble = |mut s: Vec<char>| {
        let l = s.len();
        if l >= 3 && s[l - 1] == s[l - 2] && !"aeioulsz".contains(s[l - 1]) {
            s.pop();
        }
        s
    };
    let out = if word.ends_with("ing") {
        strip(3).map(undouble)
    } else if word.ends_with("ed") {
        strip(2).map(undouble)
    } else if word.ends_with("es") {
        strip(2)
    } else if word.ends_with('s') && !word.ends_with("ss") {
        strip(1)
    } else {
        None
    };
    out.map_or_else(|| word.to_string(), |c| c.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorScore {
    pub precision: f64,
    pub recall: f64,
    pub fmean: f64,
    pub penalty: f64,
    pub score: f64,
}

fn meteor_single<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], r: &[R]) -> MeteorScore {
    let mut hyp_used = vec![false; hyp.len()];
    let mut ref_used = vec![false; r.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let stages: [&dyn Fn(&str) -> String; 2] = [&|w: &str| w.to_string(), &stem];
    for norm in stages {
        let rn: Vec<String> = r.iter().map(|w| norm(w.as_ref())).collect();
        for (i, h) in hyp.iter().enumerate() {
            if hyp_used[i] {
                continue;
            }
            let hn = norm(h.as_ref());
            if let Some(j) = (0..r.len()).find(|&j| !ref_used[j] && rn[j] == hn) {
                hyp_used[i] = true;
                ref_used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    let m = pairs.len();
    if m == 0 {
        return MeteorScore { precision: 0.0, recall: 0.0, fmean: 0.0, penalty: 0.0, score: 0.0 };
    }
    pairs.sort();
    let chunks = 1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let precision = m as f64 / hyp.len() as f64;
    let recall = m as f64 / r.len() as f64;
    let fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    MeteorScore { precision, recall, fmean, penalty, score: fmean * (1.0 - penalty) }
}

/// Best simplified METEOR over the references.
pub fn meteor_lite<S: AsRef<str>, R: AsRef<str>>(hyp: &[S], refs: &[Vec<R>]) -> Result<MeteorScore, MetricsError> {
    if refs.is_empty() {
        return Err(MetricsError::NoReferences(0));
    }
    Ok(refs
        .iter()
        .map(|r| meteor_single(hyp, r))
        .max_by(|a, b| a.score.total_cmp(&b.score))
        .unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub bleu_4: f64,
    pub meteor_lite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: [f64; MAX_N],
    pub meteor_lite: f64,
    pub pplx: Option<f64>,
    pub per_image: Vec<ImageScore>,
    pub references_used: usize,
}

impl EvalReport {
    pub fn compute<S: AsRef<str>, R: AsRef<str>>(
        ids: &[String],
        hyps: &[Vec<S>],
        refs: &[Vec<Vec<R>>],
        pplx: Option<f64>,
    ) -> Result<Self, MetricsError> {
        let b = bleu(hyps, refs)?;
        let mut per_image = Vec::with_capacity(hyps.len());
        let mut meteor_sum = 0.0;
        for ((id, h), r) in ids.iter().zip(hyps).zip(refs) {
            let m = meteor_lite(h, r)?.score;
            meteor_sum += m;
            per_image.push(ImageScore { image_id: id.clone(), bleu_4: BleuStats::sentence(h, r).bleu(4), meteor_lite: m });
        }
        Ok(EvalReport {
            bleu: b.bleu,
            meteor_lite: meteor_sum / hyps.len() as f64,
            pplx,
            per_image,
            references_used: refs.iter().map(Vec::len).sum(),
        })
    }

    /// One `name<TAB>value` record per metric.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (n, v) in self.bleu.iter().enumerate() {
            let _ = writeln!(s, "bleu_{}\t{:.6}", n + 1, v);
        }
        let _ = writeln!(s, "meteor_lite\t{:.6}", self.meteor_lite);
        if let Some(p) = self.pplx {
            let _ = writeln!(s, "pplx\t{p:.6}");
        }
        let _ = writeln!(s, "images\t{}", self.per_image.len());
        let _ = writeln!(s, "references\t{}", self.references_used);
        s
    }

    pub fn per_image_table(&self) -> String {
        let mut s = String::from("image_id\tbleu_4\tmeteor_lite\n");
        for r in &self.per_image {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", r.image_id, r.bleu_4, r.meteor_lite);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn perfect_match_is_one() {
        let b = bleu(&[w("a man rides a horse")], &[vec![w("a man rides a horse")]]).unwrap();
        assert_eq!(b.bleu, [1.0; 4]);
    }

    #[test]
    fn two_word_hand_case() {
        // p1 = 1/2, p2 = (0+1)/(1+1), p3 = p4 = (0+1)/(0+1)
        let b = bleu(&[w("the cat")], &[vec![w("the dog")]]).unwrap();
        assert!((b.bleu[3] - 0.25f64.powf(0.25)).abs() < 1e-12);
        assert!((b.bleu[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let none: Vec<Vec<String>> = vec![];
        let no_refs: Vec<Vec<Vec<String>>> = vec![];
        assert_eq!(bleu(&none, &no_refs), Err(MetricsError::Empty));
        assert_eq!(bleu(&[w("a")], &[Vec::<Vec<String>>::new()]), Err(MetricsError::NoReferences(0)));
    }

    #[test]
    fn stemmer_rules() {
        assert_eq!(stem("running"), "run");
        assert_eq!(stem("runs"), "run");
        assert_eq!(stem("boxes"), "box");
        assert_eq!(stem("jumped"), "jump");
        assert_eq!(stem("grass"), "grass");
        assert_eq!(stem("is"), "is");
        assert_eq!(stem("falling"), "fall");
    }

    #[test]
    fn meteor_identical_and_disjoint() {
        let m = meteor_lite(&w("a dog runs fast"), &[w("a dog runs fast")]).unwrap();
        assert_eq!(m.fmean, 1.0);
        assert_eq!(m.penalty, 0.5 / 64.0);
        let d = meteor_lite(&w("a dog runs fast"), &[w("the cat sat down")]).unwrap();
        assert_eq!(d.score, 0.0);
    }

    #[test]
    fn meteor_single_stem_match() {
        // one alignment (running ~ runs): P = R = 1/4, F = 1/4, one chunk → penalty 1/2
        let m = meteor_lite(&w("the man is running"), &[w("a dog that runs")]).unwrap();
        assert_eq!(m.precision, 0.25);
        assert_eq!(m.recall, 0.25);
        assert!((m.fmean - 0.25).abs() < 1e-15);
        assert_eq!(m.penalty, 0.5);
        assert!((m.score - 0.125).abs() < 1e-15);
    }

    #[test]
    fn report_text_has_one_record_per_metric() {
        let ids = vec!["a".to_string()];
        let r = EvalReport::compute(&ids, &[w("a dog")], &[vec![w("a dog")]], Some(12.5)).unwrap();
        let text = r.to_text();
        assert!(text.starts_with("bleu_1\t1.000000\n"));
        assert!(text.contains("pplx\t12.500000"));
        assert_eq!(r.per_image_table().lines().count(), 2);
    }

    proptest! {
        #[test]
        fn adding_hypothesis_as_reference_gives_one(h in prop::collection::vec("[a-d]", 1..8), r in prop::collection::vec("[a-d]", 1..8)) {
            let b = bleu(&[h.clone()], &[vec![r, h]]).unwrap();
            prop_assert_eq!(b.brevity_penalty, 1.0);
            prop_assert!((b.bleu[3] - 1.0).abs() < 1e-12);
        }

        #[test]
        fn extra_reference_never_lowers_matches(h in prop::collection::vec("[a-d]", 1..8), r1 in prop::collection::vec("[a-d]", 1..8), r2 in prop::collection::vec("[a-d]", 1..8)) {
            let one = BleuStats::sentence(&h, std::slice::from_ref(&r1));
            let two = BleuStats::sentence(&h, &[r1, r2]);
            for n in 0..MAX_N {
                prop_assert!(two.matches[n] >= one.matches[n]);
            }
        }

        #[test]
        fn shared_unigram_gives_positive_score(h in prop::collection::vec("[a-c]", 1..6), r in prop::collection::vec("[a-c]", 1..6)) {
            prop_assume!(h.iter().any(|x| r.contains(x)));
            prop_assert!(bleu(&[h], &[vec![r]]).unwrap().bleu[3] > 0.0);
        }
    }
}
