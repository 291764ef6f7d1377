use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{relevance, DmsmError, DmsmModel, DmsmParams};
use crate::util::{dot, indexed_substream, log_sum_exp};

/// One matching image/caption pair. Pairs sharing `group` come from the
/// same image and are never used as each other's negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct DmsmPair {
    pub group: usize,
    pub image: Vec<f64>,
    pub caption: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmsmTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DmsmTrainConfig {
    fn default() -> Self {
        DmsmTrainConfig { learning_rate: 0.01, epochs: 10, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DmsmTrainReport {
    /// Mean `-log P(D+|Q)` per pair, per epoch.
    pub loss: Vec<f64>,
}

/// ∂cos(a, b)/∂a
fn cosine_grad(a: &[f64], b: &[f64], r: f64) -> Vec<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    a.iter().zip(b).map(|(x, y)| y / (na * nb) - r * x / (na * na)).collect()
}

impl DmsmModel {
    /// `-log P(D+|Q)` with the positive caption first in `captions`.
    pub fn sample_loss<S: AsRef<str>>(&self, image: &[f64], captions: &[Vec<S>]) -> Result<f64, DmsmError> {
        let q = self.embed_image(image)?;
        let logits = captions
            .iter()
            .map(|c| Ok(self.gamma * relevance(&q, &self.embed_text(c)?)?))
            .collect::<Result<Vec<f64>, DmsmError>>()?;
        Ok(log_sum_exp(&logits) - logits[0])
    }

    /// [`sample_loss`](Self::sample_loss) and its gradient over every tower
    /// parameter, accumulated into `grad`.
    pub fn sample_loss_and_grad<S: AsRef<str>>(
        &self,
        image: &[f64],
        captions: &[Vec<S>],
        grad: &mut DmsmParams,
    ) -> Result<f64, DmsmError> {
        if image.len() != self.image_dim() {
            return Err(DmsmError::Dimension { expected: self.image_dim(), found: image.len() });
        }
        let img_acts = self.params.image.forward_all(image);
        let q = img_acts.last().unwrap();
        let texts = captions.iter().map(|c| self.text_forward(c)).collect::<Result<Vec<_>, _>>()?;
        let rs = texts.iter().map(|t| relevance(q, t.output())).collect::<Result<Vec<f64>, _>>()?;
        let logits: Vec<f64> = rs.iter().map(|r| self.gamma * r).collect();
        let lse = log_sum_exp(&logits);
        let loss = lse - logits[0];

        let mut dq = vec![0.0; q.len()];
        for (i, (t, &r)) in texts.iter().zip(&rs).enumerate() {
            let p = (logits[i] - lse).exp();
            let d_r = self.gamma * (p - if i == 0 { 1.0 } else { 0.0 });
            let y = t.output();
            for (acc, g) in dq.iter_mut().zip(cosine_grad(q, y, r)) {
                *acc += d_r * g;
            }
            let dy: Vec<f64> = cosine_grad(y, q, r).into_iter().map(|g| d_r * g).collect();
            self.text_backward(t, &dy, grad);
        }
        self.params.image.backward(&img_acts, &dq, &mut grad.image);
        Ok(loss)
    }
}

/// Per-pair SGD on `-log P(D+|Q)` with `model.negatives` captions drawn
/// uniformly (without replacement) from other images, resampled each epoch.
pub fn train_dmsm(model: &DmsmModel, pairs: &[DmsmPair], config: &DmsmTrainConfig) -> Result<(DmsmModel, DmsmTrainReport), DmsmError> {
    let mut model = model.clone();
    let mut report = DmsmTrainReport::default();
    if config.epochs == 0 || pairs.is_empty() {
        return Ok((model, report));
    }
    let n = model.negatives;
    // candidates per pair: every pair of another image
    let others: Vec<Vec<usize>> =
        pairs.iter().map(|p| (0..pairs.len()).filter(|&j| pairs[j].group != p.group).collect()).collect();
    if let Some(short) = others.iter().map(Vec::len).min().filter(|&m| m < n) {
        return Err(DmsmError::InsufficientNegatives { needed: n, found: short });
    }

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = indexed_substream(config.seed, "dmsm-epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let p = &pairs[i];
            let mut captions: Vec<&[String]> = vec![&p.caption];
            for k in sample(&mut rng, others[i].len(), n) {
                captions.push(&pairs[others[i][k]].caption);
            }
            let captions: Vec<Vec<&str>> = captions.iter().map(|c| c.iter().map(String::as_str).collect()).collect();
            let mut grad = model.params.zeros_like();
            let loss = model.sample_loss_and_grad(&p.image, &captions, &mut grad)?;
            if !loss.is_finite() {
                return Err(DmsmError::NonFinite { epoch });
            }
            model.params.step(&grad, config.learning_rate);
            total += loss;
        }
        let mean = total / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(DmsmError::NonFinite { epoch });
        }
        report.loss.push(mean);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmsm::DmsmConfig;

    #[test]
    fn cosine_gradient_by_differences() {
        let a = [0.3, -0.8, 1.1];
        let b = [0.5, 0.2, -0.4];
        let r = relevance(&a, &b).unwrap();
        let g = cosine_grad(&a, &b, r);
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a;
            ap[i] += h;
            let mut am = a;
            am[i] -= h;
            let fd = (relevance(&ap, &b).unwrap() - relevance(&am, &b).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let cfg = DmsmConfig { d_sem: 3, conv_channels: 4, text_hidden: 4, image_hidden: 4, negatives: 1, ..Default::default() };
        let m = DmsmModel::new(&cfg, 2, ["a", "b"]).unwrap();
        let pairs = vec![
            DmsmPair { group: 0, image: vec![1.0, 0.0], caption: vec!["a".into()] },
            DmsmPair { group: 1, image: vec![0.0, 1.0], caption: vec!["b".into()] },
        ];
        let (out, report) = train_dmsm(&m, &pairs, &DmsmTrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out, m);
        assert!(report.loss.is_empty());
    }

    #[test]
    fn too_few_negatives_rejected() {
        let cfg = DmsmConfig { d_sem: 3, conv_channels: 4, text_hidden: 4, image_hidden: 4, negatives: 2, ..Default::default() };
        let m = DmsmModel::new(&cfg, 2, ["a", "b"]).unwrap();
        let pairs = vec![
            DmsmPair { group: 0, image: vec![1.0, 0.0], caption: vec!["a".into()] },
            DmsmPair { group: 1, image: vec![0.0, 1.0], caption: vec!["b".into()] },
        ];
        assert!(matches!(
            train_dmsm(&m, &pairs, &DmsmTrainConfig::default()),
            Err(DmsmError::InsufficientNegatives { needed: 2, found: 1 })
        ));
    }
}
