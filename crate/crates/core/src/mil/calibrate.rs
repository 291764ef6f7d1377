use serde::{Deserialize, Serialize};

use super::{MilError, MilModel, RegionBag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub threshold: f64,
    pub precision: f64,
}

/// Held-out precision curves, one per model word, sorted by threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub tau: f64,
    pub curves: Vec<Vec<CalibrationPoint>>,
}

impl CalibrationTable {
    /// Precision of word `w` when thresholded at `score`: the precision
    /// among held-out images scoring at least `score`. Scores above every
    /// held-out score take the top point; an empty curve gives 0.
    pub fn precision_at(&self, w: usize, score: f64) -> f64 {
        let curve = &self.curves[w];
        if curve.is_empty() {
            return 0.0;
        }
        let i = curve.partition_point(|p| p.threshold < score);
        curve[i.min(curve.len() - 1)].precision
    }
}

/// Sweeps every observed held-out image probability as a threshold and
/// records the precision of `p >= threshold`.
pub fn calibrate(model: &MilModel, heldout: &[RegionBag], tau: f64) -> Result<CalibrationTable, MilError> {
    let mut curves = Vec::with_capacity(model.words.len());
    for (w, word) in model.words.iter().enumerate() {
        let mut scored = Vec::with_capacity(heldout.len());
        for b in heldout {
            let (p, _) = model.image_prob(w, &b.regions)?;
            scored.push((p, b.positive_words.contains(word)));
        }
        curves.push(precision_curve(scored));
    }
    Ok(CalibrationTable { tau, curves })
}

fn precision_curve(mut scored: Vec<(f64, bool)>) -> Vec<CalibrationPoint> {
    scored.retain(|(p, _)| *p > 0.0);
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            n += 1;
            tp += scored[i].1 as usize;
            i += 1;
        }
        points.push(CalibrationPoint { threshold: t, precision: tp as f64 / n as f64 });
    }
    points.reverse();
    points
}
