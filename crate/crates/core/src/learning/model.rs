//! Reference classifiers with hand-written gradients.
//!
//! Parameters live in one flat vector. Layouts (row-major):
//! - softmax regression: `W[C×D] | b[C]`
//! - one-hidden-layer MLP (tanh): `W1[H×D] | b1[H] | W2[C×H] | b2[C]`

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledSample, ParameterVector};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Softmax,
    Mlp { hidden: usize },
}

/// Architecture of a reference model: kind plus input and output widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn softmax(input_dim: usize, num_classes: usize) -> Self {
        Self { kind: ModelKind::Softmax, input_dim, num_classes }
    }

    pub fn mlp(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self { kind: ModelKind::Mlp { hidden }, input_dim, num_classes }
    }

    pub fn num_params(&self) -> usize {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::Softmax => c * d + c,
            ModelKind::Mlp { hidden: h } => h * d + h + c * h + c,
        }
    }

    /// Softmax starts at zero; the MLP gets Glorot-scaled Gaussian weights
    /// (a zero MLP has zero hidden gradients and never trains).
    pub fn init(&self, rng_seed: u64) -> ParameterVector {
        match self.kind {
            ModelKind::Softmax => ParameterVector::zeros(self.num_params()),
            ModelKind::Mlp { hidden: h } => {
                let (d, c) = (self.input_dim, self.num_classes);
                let mut rng = seed::rng(rng_seed);
                let mut v = vec![0.0; self.num_params()];
                let s1 = (2.0 / (d + h) as f64).sqrt();
                let s2 = (2.0 / (h + c) as f64).sqrt();
                let n1 = Normal::new(0.0, s1).expect("finite std");
                let n2 = Normal::new(0.0, s2).expect("finite std");
                for x in &mut v[..h * d] {
                    *x = n1.sample(&mut rng);
                }
                let w2 = h * d + h;
                for x in &mut v[w2..w2 + c * h] {
                    *x = n2.sample(&mut rng);
                }
                ParameterVector::new(v)
            }
        }
    }

    pub fn logits(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let (d, c) = (self.input_dim, self.num_classes);
        match self.kind {
            ModelKind::Softmax => affine(&params[..c * d], &params[c * d..c * d + c], x, c),
            ModelKind::Mlp { hidden: h } => {
                let hid = self.hidden(params, x, h);
                let off = h * d + h;
                affine(&params[off..off + c * h], &params[off + c * h..off + c * h + c], &hid, c)
            }
        }
    }

    fn hidden(&self, params: &[f64], x: &[f64], h: usize) -> Vec<f64> {
        let d = self.input_dim;
        let mut z = affine(&params[..h * d], &params[h * d..h * d + h], x, h);
        for v in &mut z {
            *v = v.tanh();
        }
        z
    }

    /// Cross-entropy of one sample. Adds `scale · ∇loss` into `grad`.
    pub fn accumulate_grad(&self, params: &[f64], sample: &LabeledSample, scale: f64, grad: &mut [f64]) -> f64 {
        let (d, c) = (self.input_dim, self.num_classes);
        let x = &sample.features;
        match self.kind {
            ModelKind::Softmax => {
                let logits = affine(&params[..c * d], &params[c * d..c * d + c], x, c);
                let (loss, delta) = softmax_xent(&logits, sample.label);
                for (k, &dk) in delta.iter().enumerate() {
                    let g = scale * dk;
                    if g == 0.0 {
                        continue;
                    }
                    for (gw, xi) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gw += g * xi;
                    }
                    grad[c * d + k] += g;
                }
                loss
            }
            ModelKind::Mlp { hidden: h } => {
                let hid = self.hidden(params, x, h);
                let off = h * d + h;
                let w2 = &params[off..off + c * h];
                let logits = affine(w2, &params[off + c * h..off + c * h + c], &hid, c);
                let (loss, delta) = softmax_xent(&logits, sample.label);
                let mut dz = vec![0.0; h];
                for (k, &dk) in delta.iter().enumerate() {
                    let g = scale * dk;
                    let row = &w2[k * h..(k + 1) * h];
                    for j in 0..h {
                        grad[off + k * h + j] += g * hid[j];
                        dz[j] += dk * row[j];
                    }
                    grad[off + c * h + k] += g;
                }
                for j in 0..h {
                    let g = scale * dz[j] * (1.0 - hid[j] * hid[j]);
                    if g == 0.0 {
                        continue;
                    }
                    for (gw, xi) in grad[j * d..(j + 1) * d].iter_mut().zip(x) {
                        *gw += g * xi;
                    }
                    grad[h * d + j] += g;
                }
                loss
            }
        }
    }

    pub fn sample_loss(&self, params: &[f64], sample: &LabeledSample) -> f64 {
        let logits = self.logits(params, &sample.features);
        log_sum_exp(&logits) - logits[sample.label]
    }

    /// Index of the largest logit; ties go to the lowest class index.
    pub fn predict(&self, params: &[f64], x: &[f64]) -> usize {
        let logits = self.logits(params, x);
        let mut best = 0;
        for (k, &v) in logits.iter().enumerate().skip(1) {
            if v > logits[best] {
                best = k;
            }
        }
        best
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            w[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .fold(b[r], |acc, (wi, xi)| acc + wi * xi)
        })
        .collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Returns the loss and `softmax(logits) − onehot(label)`.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = log_sum_exp(logits);
    let mut delta: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    delta[label] -= 1.0;
    (lse - logits[label], delta)
}
