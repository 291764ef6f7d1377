use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trigram::SparseVec;

/// Fully connected tanh layer, weights row-major `out × inp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inp: usize,
    pub out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn new(inp: usize, out: usize, w: Vec<f64>, b: Vec<f64>) -> Self {
        assert_eq!(w.len(), inp * out, "weight shape");
        assert_eq!(b.len(), out, "bias shape");
        Dense { inp, out, w, b }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Dense { inp, out, w: vec![0.0; inp * out], b: vec![0.0; out] }
    }

    /// Uniform in ±1/√fan-in.
    pub fn random<R: Rng>(inp: usize, out: usize, rng: &mut R) -> Self {
        let r = 1.0 / (inp.max(1) as f64).sqrt();
        let w = (0..inp * out).map(|_| rng.gen_range(-r..r)).collect();
        let b = (0..out).map(|_| rng.gen_range(-r..r)).collect();
        Dense { inp, out, w, b }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out)
            .map(|o| {
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                (row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[o]).tanh()
            })
            .collect()
    }

    pub fn forward_sparse(&self, x: &SparseVec) -> Vec<f64> {
        (0..self.out)
            .map(|o| {
                let row = &self.w[o * self.inp..(o + 1) * self.inp];
                (x.iter().map(|&(i, v)| row[i] * v).sum::<f64>() + self.b[o]).tanh()
            })
            .collect()
    }

    /// Accumulates parameter gradients given the layer input `x`, its output
    /// `y` and `dy = ∂L/∂y`; returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], y: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inp];
        for o in 0..self.out {
            let dpre = dy[o] * (1.0 - y[o] * y[o]);
            if dpre == 0.0 {
                continue;
            }
            grad.b[o] += dpre;
            let row = &self.w[o * self.inp..(o + 1) * self.inp];
            let grow = &mut grad.w[o * self.inp..(o + 1) * self.inp];
            for i in 0..self.inp {
                grow[i] += dpre * x[i];
                dx[i] += dpre * row[i];
            }
        }
        dx
    }

    /// Parameter gradients for a sparse input; the input gradient is not needed.
    pub fn backward_sparse(&self, x: &SparseVec, y: &[f64], dy: &[f64], grad: &mut Dense) {
        for o in 0..self.out {
            let dpre = dy[o] * (1.0 - y[o] * y[o]);
            if dpre == 0.0 {
                continue;
            }
            grad.b[o] += dpre;
            let grow = &mut grad.w[o * self.inp..(o + 1) * self.inp];
            for &(i, v) in x {
                grow[i] += dpre * v;
            }
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense::zeros(self.inp, self.out)
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w.iter().chain(self.b.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

/// Stack of tanh layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tower {
    pub layers: Vec<Dense>,
}

impl Tower {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inp)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out)
    }

    /// Returns every activation, input first.
    pub fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for l in &self.layers {
            let next = l.forward(acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    pub fn backward(&self, acts: &[Vec<f64>], dy: &[f64], grad: &mut Tower) -> Vec<f64> {
        let mut d = dy.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            d = l.backward(&acts[i], &acts[i + 1], &d, &mut grad.layers[i]);
        }
        d
    }

    pub fn zeros_like(&self) -> Self {
        Tower { layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_backward_matches_finite_differences() {
        let l = Dense::new(2, 2, vec![0.3, -0.2, 0.5, 0.1], vec![0.05, -0.1]);
        let x = [0.7, -1.1];
        let dy = [0.4, -0.9];
        let f = |l: &Dense, x: &[f64]| -> f64 { l.forward(x).iter().zip(&dy).map(|(a, b)| a * b).sum() };
        let y = l.forward(&x);
        let mut g = l.zeros_like();
        let dx = l.backward(&x, &y, &dy, &mut g);
        let h = 1e-6;
        for i in 0..2 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (f(&l, &xp) - f(&l, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
        for k in 0..4 {
            let mut lp = l.clone();
            lp.w[k] += h;
            let mut lm = l.clone();
            lm.w[k] -= h;
            let fd = (f(&lp, &x) - f(&lm, &x)) / (2.0 * h);
            assert!((fd - g.w[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn sparse_and_dense_forward_agree() {
        let l = Dense::new(3, 2, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6], vec![0.0, 0.1]);
        assert_eq!(l.forward(&[0.0, 2.0, 0.0]), l.forward_sparse(&vec![(1, 2.0)]));
    }
}
