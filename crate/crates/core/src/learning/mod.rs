//! Local training, aggregation and gradient statistics.

mod model;

pub use model::{ModelKind, ModelSpec};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::{seed, ClientId};

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Local SGD hyperparameters. `learning_rate` is the rate used for the
/// current round; `lr_decay` is applied by the caller between rounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub tau: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub momentum: f64,
}

fn default_decay() -> f64 {
    1.0
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.batch_size == 0 {
            return Err(invalid("tau and batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be finite and nonnegative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("lr_decay must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate after `rounds` decay steps.
    pub fn learning_rate_after(&self, rounds: u32) -> f64 {
        self.learning_rate * self.lr_decay.powi(rounds as i32)
    }
}

/// Statistics a client reports after local training. All gradients are taken
/// at the round-start model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStats {
    /// `σ̂`: square root of the summed per-coordinate variance of per-sample
    /// gradients over the first mini-batch.
    pub variance_estimate: f64,
    /// Mean gradient over the class-`c` samples, for each class present.
    pub per_class_gradient: BTreeMap<usize, Vec<f64>>,
    pub full_gradient: Vec<f64>,
    /// Mean loss over the local dataset at the round-start model.
    pub initial_loss: f64,
}

impl GradientStats {
    pub fn full_gradient_norm(&self) -> f64 {
        norm(&self.full_gradient)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean cross-entropy over the dataset, and its gradient.
pub fn loss_and_gradient(spec: &ModelSpec, model: &ParameterVector, dataset: &[LabeledSample]) -> Result<(f64, Vec<f64>)> {
    check_dims(spec, model, dataset)?;
    let scale = 1.0 / dataset.len() as f64;
    let mut grad = vec![0.0; model.len()];
    let mut loss = 0.0;
    for s in dataset {
        loss += spec.accumulate_grad(model.as_slice(), s, scale, &mut grad);
    }
    Ok((loss * scale, grad))
}

/// Local loss: mean cross-entropy, which equals the class-proportion-weighted
/// sum of per-class mean losses.
pub fn local_loss(spec: &ModelSpec, model: &ParameterVector, dataset: &[LabeledSample]) -> Result<f64> {
    check_dims(spec, model, dataset)?;
    let total: f64 = dataset.iter().map(|s| spec.sample_loss(model.as_slice(), s)).sum();
    Ok(total / dataset.len() as f64)
}

fn check_dims(spec: &ModelSpec, model: &ParameterVector, dataset: &[LabeledSample]) -> Result<()> {
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if model.len() != spec.num_params() {
        return Err(invalid(format!(
            "model has {} parameters, architecture expects {}",
            model.len(),
            spec.num_params()
        )));
    }
    if let Some(s) = dataset
        .iter()
        .find(|s| s.features.len() != spec.input_dim || s.label >= spec.num_classes)
    {
        return Err(invalid(format!(
            "sample with {} features and label {} does not fit a {}-input, {}-class model",
            s.features.len(),
            s.label,
            spec.input_dim,
            spec.num_classes
        )));
    }
    Ok(())
}

/// Runs `tau` steps of mini-batch SGD from `model`.
///
/// Batches come from shuffle-then-chunk passes over the dataset seeded by
/// `rng_seed`; a pass is reshuffled when fewer than `batch_size` indices
/// remain. A batch larger than the dataset is the whole dataset.
pub fn local_train(
    spec: &ModelSpec,
    model: &ParameterVector,
    dataset: &[LabeledSample],
    cfg: &TrainingConfig,
    rng_seed: u64,
) -> Result<(ParameterVector, GradientStats)> {
    check_dims(spec, model, dataset)?;
    cfg.validate()?;
    let stats = round_start_stats(spec, model, dataset, cfg, rng_seed)?;

    let mut rng = seed::rng(rng_seed);
    let n = dataset.len();
    let b = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut pos = 0;

    let mut w = model.clone();
    let mut velocity = vec![0.0; w.len()];
    let mut grad = vec![0.0; w.len()];
    let scale = 1.0 / b as f64;
    for _ in 0..cfg.tau {
        if pos + b > n {
            order.shuffle(&mut rng);
            pos = 0;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in &order[pos..pos + b] {
            spec.accumulate_grad(w.as_slice(), &dataset[i], scale, &mut grad);
        }
        pos += b;
        for ((wi, vi), gi) in w.as_mut_slice().iter_mut().zip(&mut velocity).zip(&grad) {
            *vi = cfg.momentum * *vi + gi;
            *wi -= cfg.learning_rate * *vi;
        }
    }
    Ok((w, stats))
}

fn round_start_stats(
    spec: &ModelSpec,
    model: &ParameterVector,
    dataset: &[LabeledSample],
    cfg: &TrainingConfig,
    rng_seed: u64,
) -> Result<GradientStats> {
    let dim = model.len();
    let params = model.as_slice();
    let n = dataset.len();

    let mut class_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in dataset {
        *class_counts.entry(s.label).or_default() += 1;
    }
    let mut per_class: BTreeMap<usize, Vec<f64>> =
        class_counts.keys().map(|&c| (c, vec![0.0; dim])).collect();
    let mut full = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    let mut loss = 0.0;
    for s in dataset {
        scratch.iter_mut().for_each(|g| *g = 0.0);
        loss += spec.accumulate_grad(params, s, 1.0, &mut scratch);
        let class_scale = 1.0 / class_counts[&s.label] as f64;
        let acc = per_class.get_mut(&s.label).expect("class seen above");
        for ((a, f), g) in acc.iter_mut().zip(full.iter_mut()).zip(&scratch) {
            *a += class_scale * g;
            *f += g / n as f64;
        }
    }

    // σ̂ uses the first batch of the same shuffle local training draws.
    let mut rng = seed::rng(rng_seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let batch = &order[..cfg.batch_size.min(n)];
    let variance_estimate = if batch.len() < 2 {
        0.0
    } else {
        let per_sample: Vec<Vec<f64>> = batch
            .iter()
            .map(|&i| {
                let mut g = vec![0.0; dim];
                spec.accumulate_grad(params, &dataset[i], 1.0, &mut g);
                g
            })
            .collect();
        let m = per_sample.len() as f64;
        let mut summed = 0.0;
        for j in 0..dim {
            let mean = per_sample.iter().map(|g| g[j]).sum::<f64>() / m;
            summed += per_sample.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / (m - 1.0);
        }
        summed.sqrt()
    };

    Ok(GradientStats {
        variance_estimate,
        per_class_gradient: per_class,
        full_gradient: full,
        initial_loss: loss / n as f64,
    })
}

/// Sample-count-weighted average `Σ α_n w_n`, reduced in ascending client order.
pub fn aggregate(
    models: &BTreeMap<ClientId, ParameterVector>,
    sample_counts: &BTreeMap<ClientId, usize>,
) -> Result<ParameterVector> {
    let first = models.values().next().ok_or_else(|| invalid("aggregate of no models"))?;
    let dim = first.len();
    let mut total = 0usize;
    for (id, m) in models {
        if m.len() != dim {
            return Err(invalid(format!("client {id} model has dimension {}, expected {dim}", m.len())));
        }
        match sample_counts.get(id) {
            Some(&n) if n > 0 => total += n,
            _ => return Err(invalid(format!("client {id} has no positive sample count"))),
        }
    }
    let mut out = vec![0.0; dim];
    for (id, m) in models {
        let alpha = sample_counts[id] as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(m.as_slice()) {
            *o += alpha * v;
        }
    }
    Ok(ParameterVector(out))
}

/// Fraction of samples whose predicted class equals the label.
pub fn model_accuracy(spec: &ModelSpec, model: &ParameterVector, dataset: &[LabeledSample]) -> Result<f64> {
    check_dims(spec, model, dataset)?;
    let correct = dataset
        .iter()
        .filter(|s| spec.predict(model.as_slice(), &s.features) == s.label)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample(x: &[f64], label: usize) -> LabeledSample {
        LabeledSample { features: x.to_vec(), label }
    }

    fn random_fixture(spec: &ModelSpec, n: usize, seed_: u64) -> (ParameterVector, Vec<LabeledSample>) {
        let mut rng = seed::rng(seed_);
        let w = ParameterVector::new((0..spec.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let data = (0..n)
            .map(|i| LabeledSample {
                features: (0..spec.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                label: i % spec.num_classes,
            })
            .collect();
        (w, data)
    }

    fn cfg(tau: usize, b: usize, lr: f64) -> TrainingConfig {
        TrainingConfig { tau, batch_size: b, learning_rate: lr, lr_decay: 1.0, momentum: 0.0 }
    }

    #[test]
    fn zero_softmax_has_log_c_loss() {
        let spec = ModelSpec::softmax(3, 5);
        let data = vec![sample(&[1.0, 2.0, 3.0], 0), sample(&[-1.0, 0.5, 0.0], 4)];
        let loss = local_loss(&spec, &ParameterVector::zeros(spec.num_params()), &data).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_model_has_zero_loss() {
        let spec = ModelSpec::softmax(1, 2);
        // bias of class 1 dominates
        let w = ParameterVector::new(vec![0.0, 0.0, 0.0, 1000.0]);
        let loss = local_loss(&spec, &w, &[sample(&[1.0], 1)]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn four_sample_loss_matches_hand_computation() {
        // W = [[1, 0], [0, 1]], b = [0, 0]; logits equal the features.
        let spec = ModelSpec::softmax(2, 2);
        let w = ParameterVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let data = vec![
            sample(&[1.0, 0.0], 0),
            sample(&[0.0, 1.0], 1),
            sample(&[2.0, 0.0], 1),
            sample(&[0.0, 0.0], 0),
        ];
        // -ln softmax: ln(1+e^-1), ln(1+e^-1), ln(1+e^2), ln 2
        let expected = (2.0 * (1.0 + (-1f64).exp()).ln() + (1.0 + 2f64.exp()).ln() + 2f64.ln()) / 4.0;
        let loss = local_loss(&spec, &w, &data).unwrap();
        assert!((loss - expected).abs() < 1e-14);
        let (loss2, _) = loss_and_gradient(&spec, &w, &data).unwrap();
        assert!((loss2 - expected).abs() < 1e-14);
    }

    #[test]
    fn empty_dataset_rejected() {
        let spec = ModelSpec::softmax(2, 2);
        let w = ParameterVector::zeros(6);
        assert!(local_loss(&spec, &w, &[]).is_err());
        assert!(model_accuracy(&spec, &w, &[]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_model() {
        let spec = ModelSpec::mlp(3, 4, 3);
        let (w, data) = random_fixture(&spec, 20, 3);
        let (out, _) = local_train(&spec, &w, &data, &cfg(5, 4, 0.0), 11).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn full_batch_single_step_matches_finite_differences() {
        let spec = ModelSpec::softmax(3, 3);
        let (w, data) = random_fixture(&spec, 12, 5);
        let lr = 0.05;
        let (out, _) = local_train(&spec, &w, &data, &cfg(1, data.len(), lr), 1).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..w.len())
            .map(|j| {
                let mut plus = w.clone();
                let mut minus = w.clone();
                plus.as_mut_slice()[j] += h;
                minus.as_mut_slice()[j] -= h;
                (local_loss(&spec, &plus, &data).unwrap() - local_loss(&spec, &minus, &data).unwrap()) / (2.0 * h)
            })
            .collect();
        let step: Vec<f64> = w.as_slice().iter().zip(out.as_slice()).map(|(a, b)| (a - b) / lr).collect();
        let diff: Vec<f64> = step.iter().zip(&fd).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) / norm(&fd) <= 1e-4);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = ModelSpec::mlp(4, 5, 3);
        let (w, data) = random_fixture(&spec, 30, 9);
        let c = TrainingConfig { momentum: 0.5, ..cfg(7, 8, 0.1) };
        let (a, sa) = local_train(&spec, &w, &data, &c, 42).unwrap();
        let (b, sb) = local_train(&spec, &w, &data, &c, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa.variance_estimate.to_bits(), sb.variance_estimate.to_bits());
        assert_eq!(sa.full_gradient, sb.full_gradient);
    }

    #[test]
    fn full_gradient_decomposes_by_class() {
        for spec in [ModelSpec::softmax(4, 3), ModelSpec::mlp(4, 6, 3)] {
            let (w, mut data) = random_fixture(&spec, 25, 21);
            data.truncate(23);
            let (_, stats) = local_train(&spec, &w, &data, &cfg(1, 4, 0.0), 2).unwrap();
            let mut counts = [0usize; 3];
            data.iter().for_each(|s| counts[s.label] += 1);
            for j in 0..w.len() {
                let mix: f64 = stats
                    .per_class_gradient
                    .iter()
                    .map(|(c, g)| counts[*c] as f64 / data.len() as f64 * g[j])
                    .sum();
                assert!((mix - stats.full_gradient[j]).abs() <= 1e-10);
            }
            let (_, g) = loss_and_gradient(&spec, &w, &data).unwrap();
            for (a, b) in g.iter().zip(&stats.full_gradient) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn variance_estimate_matches_direct_computation() {
        let spec = ModelSpec::softmax(2, 2);
        // identical samples have identical gradients
        let data = vec![sample(&[1.0, -1.0], 0); 6];
        let (_, stats) = local_train(&spec, &ParameterVector::zeros(6), &data, &cfg(1, 4, 0.1), 3).unwrap();
        assert!(stats.variance_estimate.abs() < 1e-15);

        // two samples with gradients g1, g2: summed unbiased variance = ‖g1 − g2‖² / 2
        let data = vec![sample(&[1.0, 0.0], 0), sample(&[0.0, 1.0], 1)];
        let w = ParameterVector::zeros(6);
        let (_, stats) = local_train(&spec, &w, &data, &cfg(1, 2, 0.1), 3).unwrap();
        let mut g1 = vec![0.0; 6];
        let mut g2 = vec![0.0; 6];
        spec.accumulate_grad(w.as_slice(), &data[0], 1.0, &mut g1);
        spec.accumulate_grad(w.as_slice(), &data[1], 1.0, &mut g2);
        let d2: f64 = g1.iter().zip(&g2).map(|(a, b)| (a - b).powi(2)).sum();
        assert!((stats.variance_estimate - (d2 / 2.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn aggregate_examples() {
        let v = ParameterVector::new(vec![1.0, -2.0, 3.5]);
        let single = BTreeMap::from([(ClientId(4), v.clone())]);
        let counts = BTreeMap::from([(ClientId(4), 7usize), (ClientId(5), 7)]);
        assert_eq!(aggregate(&single, &counts).unwrap(), v);

        let neg = ParameterVector::new(v.as_slice().iter().map(|x| -x).collect());
        let pair = BTreeMap::from([(ClientId(4), v.clone()), (ClientId(5), neg)]);
        assert!(aggregate(&pair, &counts).unwrap().as_slice().iter().all(|x| *x == 0.0));

        let models = BTreeMap::from([
            (ClientId(0), ParameterVector::new(vec![0.0, 0.0])),
            (ClientId(1), ParameterVector::new(vec![4.0, 8.0])),
        ]);
        let counts = BTreeMap::from([(ClientId(0), 1usize), (ClientId(1), 3)]);
        assert_eq!(aggregate(&models, &counts).unwrap().as_slice(), &[3.0, 6.0]);
    }

    #[test]
    fn aggregate_errors() {
        let counts = BTreeMap::from([(ClientId(0), 1usize), (ClientId(1), 1)]);
        assert!(aggregate(&BTreeMap::new(), &counts).is_err());
        let models = BTreeMap::from([
            (ClientId(0), ParameterVector::new(vec![0.0, 0.0])),
            (ClientId(1), ParameterVector::new(vec![4.0])),
        ]);
        assert!(aggregate(&models, &counts).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let spec = ModelSpec::softmax(1, 2);
        let data = vec![sample(&[1.0], 0), sample(&[2.0], 0), sample(&[3.0], 1), sample(&[4.0], 1)];
        // all-zero logits tie; class 0 wins
        assert_eq!(model_accuracy(&spec, &ParameterVector::zeros(4), &data).unwrap(), 0.5);

        // decision rule: class 1 iff x > 2.5
        let w = ParameterVector::new(vec![0.0, 1.0, 0.0, -2.5]);
        assert_eq!(model_accuracy(&spec, &w, &data).unwrap(), 1.0);

        // ten samples, x = 0..9, labels alternate; correct where (x > 2.5) == (label == 1):
        // x=0 l0 ok, 1 l1 no, 2 l0 ok, 3 l1 ok, 4 l0 no, 5 l1 ok, 6 l0 no, 7 l1 ok, 8 l0 no, 9 l1 ok
        let ten: Vec<_> = (0..10).map(|i| sample(&[i as f64], i % 2)).collect();
        assert_eq!(model_accuracy(&spec, &w, &ten).unwrap(), 0.6);
    }

    #[test]
    fn decay_schedule() {
        let c = TrainingConfig { lr_decay: 0.9992, ..cfg(1, 1, 0.01) };
        assert_eq!(c.learning_rate_after(0), 0.01);
        assert!((c.learning_rate_after(2) / (0.01 * 0.9992 * 0.9992) - 1.0).abs() < 1e-15);
    }
}
