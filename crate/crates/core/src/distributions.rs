//! Class-distribution arithmetic.
//!
//! Drift and divergence are both expressed as a weighted L1 distance between
//! class-proportion vectors, the weights being per-class gradient norms.
//! Vectors of different length are reconciled by zero-padding: a class that
//! has not appeared yet carries proportion 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ClientId;

/// Per-class sample proportions. Either sums to 1 or is all zeros (empty dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution {
    proportions: Vec<f64>,
}

impl ClassDistribution {
    pub const SUM_TOLERANCE: f64 = 1e-9;

    pub fn new(proportions: Vec<f64>) -> Result<Self> {
        if let Some((c, v)) = proportions
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0 + Self::SUM_TOLERANCE)
        {
            return Err(invalid(format!("class {c} has proportion {v} outside [0, 1]")));
        }
        let sum: f64 = proportions.iter().sum();
        let all_zero = proportions.iter().all(|&v| v == 0.0);
        if !all_zero && (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(invalid(format!("proportions sum to {sum}, expected 1")));
        }
        Ok(Self { proportions })
    }

    /// Normalizes a class histogram by its total count. An all-zero histogram
    /// gives the empty-dataset sentinel.
    pub fn from_counts(counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        let proportions = if total == 0 {
            vec![0.0; counts.len()]
        } else {
            let total = total as f64;
            counts.iter().map(|&n| n as f64 / total).collect()
        };
        Self { proportions }
    }

    pub fn empty(len: usize) -> Self {
        Self { proportions: vec![0.0; len] }
    }

    pub fn uniform(len: usize) -> Self {
        Self { proportions: vec![1.0 / len as f64; len] }
    }

    /// Sample-count-weighted mean of distributions: `Σ α_n p_n` with
    /// `α_n = D_n / Σ D`. Parts are reduced in the order given.
    pub fn mixture<'a, I>(parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a ClassDistribution, usize)>,
    {
        let parts: Vec<_> = parts.into_iter().collect();
        let total: usize = parts.iter().map(|(_, n)| n).sum();
        if total == 0 {
            return Err(invalid("mixture of zero samples"));
        }
        let len = parts.iter().map(|(p, _)| p.len()).max().unwrap_or(0);
        let total = total as f64;
        let mut out = vec![0.0; len];
        for (p, n) in parts {
            let alpha = n as f64 / total;
            for (o, v) in out.iter_mut().zip(&p.proportions) {
                *o += alpha * v;
            }
        }
        Ok(Self { proportions: out })
    }

    pub fn len(&self) -> usize {
        self.proportions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proportions.iter().all(|&v| v == 0.0)
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    /// Proportion of class `c`; zero for classes beyond the stored length.
    pub fn get(&self, c: usize) -> f64 {
        self.proportions.get(c).copied().unwrap_or(0.0)
    }

    pub fn padded(&self, len: usize) -> Self {
        let mut proportions = self.proportions.clone();
        if proportions.len() < len {
            proportions.resize(len, 0.0);
        }
        Self { proportions }
    }

    /// Plain L1 distance after zero-padding.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        let len = self.len().max(other.len());
        (0..len).map(|c| (self.get(c) - other.get(c)).abs()).sum()
    }

    /// Indices of classes with positive proportion.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.proportions
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(c, _)| c)
    }
}

/// Per-class gradient norms `L^(c)` (exact or estimated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassGradientNorms {
    norms: Vec<f64>,
}

impl ClassGradientNorms {
    pub fn new(norms: Vec<f64>) -> Result<Self> {
        if let Some((c, v)) = norms
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(invalid(format!("class {c} has gradient norm {v}; must be finite and >= 0")));
        }
        Ok(Self { norms })
    }

    pub fn filled(len: usize, value: f64) -> Self {
        assert!(value.is_finite() && value >= 0.0);
        Self { norms: vec![value; len] }
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.norms
    }

    /// Norm for class `c`; zero beyond the stored length.
    pub fn get(&self, c: usize) -> f64 {
        self.norms.get(c).copied().unwrap_or(0.0)
    }

    /// Extends to `len` classes, filling new entries with `fill`.
    pub fn padded_with(&self, len: usize, fill: f64) -> Self {
        let mut norms = self.norms.clone();
        if norms.len() < len {
            norms.resize(len, fill);
        }
        Self { norms }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor.is_finite() && factor >= 0.0);
        Self { norms: self.norms.iter().map(|v| v * factor).collect() }
    }
}

/// `Σ_c |p^(c) - q^(c)| · L^(c)` over the zero-padded class universe.
pub fn weighted_emd(p: &ClassDistribution, q: &ClassDistribution, weights: &ClassGradientNorms) -> f64 {
    let len = p.len().max(q.len());
    (0..len)
        .map(|c| (p.get(c) - q.get(c)).abs() * weights.get(c))
        .sum()
}

/// Upper bound on the change of a client's local gradient between two frames.
/// Classes new in `p_now` get a prior proportion of zero.
pub fn temporal_drift_bound(
    p_now: &ClassDistribution,
    p_prev: &ClassDistribution,
    weights: &ClassGradientNorms,
) -> f64 {
    weighted_emd(p_now, &p_prev.padded(p_now.len()), weights)
}

/// Collective divergence of a scheduled set, with optional per-client drift bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub collective_divergence_bound: f64,
    pub drift_bound_per_client: BTreeMap<ClientId, f64>,
    pub aggregate_distribution: ClassDistribution,
}

impl DivergenceReport {
    /// Fills `drift_bound_per_client` for every aggregated client found in `previous`.
    pub fn with_drift_bounds(
        mut self,
        current: &BTreeMap<ClientId, ClassDistribution>,
        previous: &BTreeMap<ClientId, ClassDistribution>,
        weights: &ClassGradientNorms,
    ) -> Self {
        for (id, now) in current {
            if let Some(prev) = previous.get(id) {
                self.drift_bound_per_client
                    .insert(*id, temporal_drift_bound(now, prev, weights));
            }
        }
        self
    }
}

/// Weighted-EMD bound on `‖Σ α_n ∇F_n − ∇F‖` for the selected clients.
pub fn collective_divergence_bound(
    selected: &BTreeSet<ClientId>,
    distributions: &BTreeMap<ClientId, ClassDistribution>,
    sample_counts: &BTreeMap<ClientId, usize>,
    global: &ClassDistribution,
    weights: &ClassGradientNorms,
) -> Result<DivergenceReport> {
    if selected.is_empty() {
        return Err(invalid("collective divergence of an empty set"));
    }
    let mut parts = Vec::with_capacity(selected.len());
    for id in selected {
        let p = distributions
            .get(id)
            .ok_or_else(|| invalid(format!("no distribution for client {id}")))?;
        let n = *sample_counts
            .get(id)
            .ok_or_else(|| invalid(format!("no sample count for client {id}")))?;
        if n == 0 {
            return Err(invalid(format!("client {id} has zero samples")));
        }
        parts.push((p, n));
    }
    let aggregate = ClassDistribution::mixture(parts)?;
    Ok(DivergenceReport {
        collective_divergence_bound: weighted_emd(&aggregate, global, weights),
        drift_bound_per_client: BTreeMap::new(),
        aggregate_distribution: aggregate,
    })
}

/// The three terms bounding the expected federated/centralized gap of one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VBoundTerms {
    pub iteration_error: f64,
    pub sampling_variance: f64,
    pub collective_divergence: f64,
}

impl VBoundTerms {
    pub fn total(&self) -> f64 {
        self.iteration_error + self.sampling_variance + self.collective_divergence
    }
}

/// `(½τ(τ−1)ηβg, ητσ/√(Sb), ητ·divergence)`. Diagnostic only.
#[allow(clippy::too_many_arguments)]
pub fn v_bound_terms(
    tau: usize,
    eta: f64,
    beta: f64,
    g: f64,
    sigma: f64,
    batch: usize,
    selected_count: usize,
    divergence: f64,
) -> Result<VBoundTerms> {
    if tau == 0 || batch == 0 || selected_count == 0 {
        return Err(invalid("tau, batch and selected_count must be positive"));
    }
    if !(eta > 0.0 && beta > 0.0 && g > 0.0) || !(sigma >= 0.0 && divergence >= 0.0) {
        return Err(invalid("eta, beta, g must be positive; sigma, divergence nonnegative"));
    }
    let tau_f = tau as f64;
    Ok(VBoundTerms {
        iteration_error: 0.5 * tau_f * (tau_f - 1.0) * eta * beta * g,
        sampling_variance: eta * tau_f * sigma / ((selected_count * batch) as f64).sqrt(),
        collective_divergence: eta * tau_f * divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> ClassDistribution {
        ClassDistribution::new(v.to_vec()).unwrap()
    }

    fn norms(v: &[f64]) -> ClassGradientNorms {
        ClassGradientNorms::new(v.to_vec()).unwrap()
    }

    fn ids(v: &[u32]) -> BTreeSet<ClientId> {
        v.iter().map(|&i| ClientId(i)).collect()
    }

    #[test]
    fn weighted_emd_examples() {
        assert_eq!(weighted_emd(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0]), &norms(&[1.0, 1.0])), 2.0);
        assert_eq!(weighted_emd(&dist(&[0.3, 0.7]), &dist(&[0.3, 0.7]), &norms(&[5.0, 9.0])), 0.0);
        let v = weighted_emd(&dist(&[0.5, 0.5]), &dist(&[0.25, 0.75]), &norms(&[2.0, 1.0]));
        assert!((v - 0.75).abs() < 1e-15);
    }

    #[test]
    fn negative_weight_rejected() {
        assert!(ClassGradientNorms::new(vec![1.0, -0.1]).is_err());
        assert!(ClassGradientNorms::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn distribution_validation() {
        assert!(ClassDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(ClassDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ClassDistribution::new(vec![0.0, 0.0]).unwrap().is_empty());
        let d = ClassDistribution::from_counts(&[1, 3]);
        assert_eq!(d.proportions(), &[0.25, 0.75]);
    }

    #[test]
    fn temporal_drift_examples() {
        let v = temporal_drift_bound(&dist(&[0.5, 0.5]), &dist(&[1.0]), &norms(&[1.0, 1.0]));
        assert!((v - 1.0).abs() < 1e-15);
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(temporal_drift_bound(&p, &p, &norms(&[4.0, 1.0, 7.0])), 0.0);
        assert_eq!(temporal_drift_bound(&dist(&[0.0, 1.0]), &dist(&[1.0, 0.0]), &norms(&[3.0, 3.0])), 6.0);
    }

    #[test]
    fn collective_divergence_examples() {
        let global = dist(&[0.5, 0.5]);
        let mut d = BTreeMap::new();
        let mut n = BTreeMap::new();
        d.insert(ClientId(0), dist(&[0.5, 0.5]));
        d.insert(ClientId(1), dist(&[1.0, 0.0]));
        d.insert(ClientId(2), dist(&[0.0, 1.0]));
        for i in 0..3 {
            n.insert(ClientId(i), 10);
        }
        let w = norms(&[1.0, 1.0]);
        let r = collective_divergence_bound(&ids(&[0]), &d, &n, &global, &w).unwrap();
        assert_eq!(r.collective_divergence_bound, 0.0);
        let r = collective_divergence_bound(&ids(&[1, 2]), &d, &n, &global, &w).unwrap();
        assert_eq!(r.collective_divergence_bound, 0.0);
        assert_eq!(r.aggregate_distribution.proportions(), &[0.5, 0.5]);
        let r = collective_divergence_bound(&ids(&[1]), &d, &n, &global, &norms(&[2.0, 2.0])).unwrap();
        assert!((r.collective_divergence_bound - 2.0).abs() < 1e-15);
    }

    #[test]
    fn collective_divergence_errors() {
        let global = dist(&[1.0]);
        let d = BTreeMap::from([(ClientId(0), dist(&[1.0]))]);
        let n = BTreeMap::from([(ClientId(0), 5usize)]);
        let w = norms(&[1.0]);
        assert!(collective_divergence_bound(&ids(&[]), &d, &n, &global, &w).is_err());
        assert!(collective_divergence_bound(&ids(&[1]), &d, &n, &global, &w).is_err());
    }

    #[test]
    fn drift_bounds_attached_to_report() {
        let now = BTreeMap::from([(ClientId(0), dist(&[0.5, 0.5]))]);
        let prev = BTreeMap::from([(ClientId(0), dist(&[1.0]))]);
        let n = BTreeMap::from([(ClientId(0), 4usize)]);
        let w = norms(&[1.0, 1.0]);
        let r = collective_divergence_bound(&ids(&[0]), &now, &n, &dist(&[0.5, 0.5]), &w)
            .unwrap()
            .with_drift_bounds(&now, &prev, &w);
        assert!((r.drift_bound_per_client[&ClientId(0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn v_bound_examples() {
        let t = v_bound_terms(1, 0.3, 2.0, 5.0, 1.0, 8, 3, 0.2).unwrap();
        assert_eq!(t.iteration_error, 0.0);
        let t = v_bound_terms(3, 0.1, 1.0, 1.0, 0.0, 8, 3, 0.0).unwrap();
        assert!((t.iteration_error - 0.3).abs() < 1e-15);
        assert_eq!((t.sampling_variance, t.collective_divergence), (0.0, 0.0));
        let t = v_bound_terms(2, 0.1, 1.0, 1.0, 4.0, 4, 4, 0.5).unwrap();
        assert!((t.iteration_error - 0.1).abs() < 1e-15);
        assert!((t.sampling_variance - 0.2).abs() < 1e-15);
        assert!((t.collective_divergence - 0.1).abs() < 1e-15);
        assert!(v_bound_terms(0, 0.1, 1.0, 1.0, 1.0, 4, 4, 0.5).is_err());
    }

    fn simplex(len: usize) -> impl Strategy<Value = ClassDistribution> {
        prop::collection::vec(0.0f64..1.0, len).prop_map(|raw| {
            let s: f64 = raw.iter().sum::<f64>() + 1e-12;
            let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let rest: f64 = p[1..].iter().sum();
            p[0] = (1.0 - rest).max(0.0);
            ClassDistribution::new(p).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn weighted_emd_is_a_pseudometric(
            p in simplex(6), q in simplex(6), r in simplex(6),
            w in prop::collection::vec(0.0f64..10.0, 6),
        ) {
            let w = ClassGradientNorms::new(w).unwrap();
            let pq = weighted_emd(&p, &q, &w);
            prop_assert!(pq >= 0.0);
            prop_assert_eq!(pq, weighted_emd(&q, &p, &w));
            let pr = weighted_emd(&p, &r, &w);
            let rq = weighted_emd(&r, &q, &w);
            prop_assert!(pq <= pr + rq + 1e-12);
            prop_assert_eq!(weighted_emd(&p, &p, &w), 0.0);
        }
    }

    proptest! {
        #[test]
        fn zero_padding_leaves_outputs_unchanged(
            p in simplex(4), q in simplex(4),
            w in prop::collection::vec(0.0f64..10.0, 4),
            extra in 1usize..5,
        ) {
            let w = ClassGradientNorms::new(w).unwrap();
            let wide = w.padded_with(4 + extra, 3.0);
            let (pp, qp) = (p.padded(4 + extra), q.padded(4 + extra));
            prop_assert_eq!(weighted_emd(&p, &q, &w), weighted_emd(&pp, &qp, &wide));
            prop_assert_eq!(temporal_drift_bound(&p, &q, &w), temporal_drift_bound(&pp, &qp, &wide));
            let d = BTreeMap::from([(ClientId(0), p.clone())]);
            let dp = BTreeMap::from([(ClientId(0), pp)]);
            let n = BTreeMap::from([(ClientId(0), 3usize)]);
            let a = collective_divergence_bound(&ids(&[0]), &d, &n, &q, &w).unwrap();
            let b = collective_divergence_bound(&ids(&[0]), &dp, &n, &qp, &wide).unwrap();
            prop_assert_eq!(a.collective_divergence_bound, b.collective_divergence_bound);
        }
    }
}
