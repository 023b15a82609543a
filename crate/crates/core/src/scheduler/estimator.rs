use std::collections::BTreeMap;

use crate::distributions::{ClassDistribution, ClassGradientNorms};
use crate::learning::norm;
use crate::ClientId;

const MIN_DISTANCE: f64 = 1e-9;

/// Class-count-weighted mean of the clients' per-class gradients.
pub fn global_class_gradients(
    per_class_gradients: &BTreeMap<ClientId, BTreeMap<usize, Vec<f64>>>,
    distributions: &BTreeMap<ClientId, ClassDistribution>,
    sample_counts: &BTreeMap<ClientId, usize>,
) -> BTreeMap<usize, Vec<f64>> {
    let mut sums: BTreeMap<usize, (f64, Vec<f64>)> = BTreeMap::new();
    for (id, classes) in per_class_gradients {
        let (Some(p), Some(&n)) = (distributions.get(id), sample_counts.get(id)) else {
            continue;
        };
        for (&c, g) in classes {
            let weight = p.get(c) * n as f64;
            let entry = sums.entry(c).or_insert_with(|| (0.0, vec![0.0; g.len()]));
            entry.0 += weight;
            for (a, v) in entry.1.iter_mut().zip(g) {
                *a += weight * v;
            }
        }
    }
    sums.into_iter()
        .filter(|(_, (w, _))| *w > 0.0)
        .map(|(c, (w, mut g))| {
            g.iter_mut().for_each(|v| *v /= w);
            (c, g)
        })
        .collect()
}

/// `L̂^(c) = max_n ‖p_n^(c)·g_n^(c) − p^(c)·g^(c)‖ / ‖p_n − p‖₁` over the
/// given clients, where `g` are class-mean gradients. Clients whose
/// distribution matches the global one are skipped and classes without a
/// contributor keep their previous estimate; new classes start at 1.
pub fn estimate_class_norms(
    per_class_gradients: &BTreeMap<ClientId, BTreeMap<usize, Vec<f64>>>,
    global_per_class: &BTreeMap<usize, Vec<f64>>,
    distributions: &BTreeMap<ClientId, ClassDistribution>,
    global: &ClassDistribution,
    previous: &ClassGradientNorms,
) -> ClassGradientNorms {
    let len = previous.len().max(global.len());
    let mut out = previous.padded_with(len, 1.0).as_slice().to_vec();
    let mut fresh: BTreeMap<usize, f64> = BTreeMap::new();
    for (id, classes) in per_class_gradients {
        let Some(p) = distributions.get(id) else { continue };
        let distance = p.l1_distance(global);
        if !(distance >= MIN_DISTANCE) {
            continue;
        }
        for (&c, g_global) in global_per_class {
            let (pn, pg) = (p.get(c), global.get(c));
            let diff: Vec<f64> = match classes.get(&c) {
                Some(g_local) => g_local.iter().zip(g_global).map(|(a, b)| pn * a - pg * b).collect(),
                None => g_global.iter().map(|b| -pg * b).collect(),
            };
            let ratio = norm(&diff) / distance;
            if ratio.is_finite() {
                let e = fresh.entry(c).or_insert(0.0);
                *e = e.max(ratio);
            }
        }
    }
    for (c, v) in fresh {
        if c >= out.len() {
            out.resize(c + 1, 1.0);
        }
        out[c] = v;
    }
    ClassGradientNorms::new(out).expect("ratios are finite and nonnegative")
}
