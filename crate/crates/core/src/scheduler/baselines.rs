//! Comparison policies. Each ranks the deadline-feasible clients by its own
//! criterion and admits them first-fit until the bandwidth runs out.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};

use super::{feasible_bandwidths, fits, objective_terms, Policy, ScheduleDecision, SelectionContext};
use crate::distributions::{temporal_drift_bound, ClassDistribution};
use crate::error::{invalid, Result};
use crate::seed;
use crate::ClientId;

pub(super) fn baseline_select(policy: Policy, ctx: &SelectionContext<'_>, rng_seed: u64) -> Result<ScheduleDecision> {
    if ctx.reports.is_empty() {
        return Err(invalid("no client reports"));
    }
    let feasible = feasible_bandwidths(ctx)?;
    let mut rng = seed::rng(rng_seed);
    // random order doubles as the tie-break for every ranking
    let mut order: Vec<ClientId> = feasible.keys().copied().collect();
    order.shuffle(&mut rng);

    let order = match policy {
        Policy::Random => order,
        Policy::BestChannel => ranked(order, |id| ctx.reports[id].channel.gain),
        Policy::BestNorm => ranked(order, |id| ctx.reports[id].gradient_norm),
        Policy::PureDrift => ranked(order, |id| {
            let r = &ctx.reports[id];
            temporal_drift_bound(&r.distribution_now, &r.distribution_prev_frame, ctx.weights)
        }),
        Policy::PowerOfChoice => {
            let d = (2 * expected_capacity(&feasible, ctx.budget.total_bandwidth)).min(feasible.len());
            let ids: Vec<ClientId> = feasible.keys().copied().collect();
            let mut picked: Vec<usize> = index::sample(&mut rng, ids.len(), d).into_vec();
            picked.sort_unstable();
            let candidates: BTreeSet<ClientId> = picked.into_iter().map(|i| ids[i]).collect();
            let order = order.into_iter().filter(|id| candidates.contains(id)).collect();
            ranked(order, |id| ctx.reports[id].local_loss)
        }
        Policy::FedCbs => return balanced_select(ctx, &feasible, order),
        Policy::FedTeddi | Policy::FedCgd => {
            return Err(invalid(format!("{policy} is not a baseline policy")));
        }
    };
    first_fit(ctx, &feasible, &order)
}

/// Stable sort by descending key, so equal keys keep the random order.
fn ranked(mut order: Vec<ClientId>, key: impl Fn(&ClientId) -> f64) -> Vec<ClientId> {
    order.sort_by(|a, b| key(b).total_cmp(&key(a)));
    order
}

/// How many clients fit when the cheapest are taken first.
fn expected_capacity(feasible: &BTreeMap<ClientId, f64>, total: f64) -> usize {
    let mut by_cost: Vec<(ClientId, f64)> = feasible.iter().map(|(id, b)| (*id, *b)).collect();
    by_cost.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut taken = BTreeMap::new();
    for (id, b) in by_cost {
        if fits(&taken, id, b, total) {
            taken.insert(id, b);
        }
    }
    taken.len()
}

fn first_fit(ctx: &SelectionContext<'_>, feasible: &BTreeMap<ClientId, f64>, order: &[ClientId]) -> Result<ScheduleDecision> {
    let mut decision = ScheduleDecision::default();
    for id in order {
        let b = feasible[id];
        if fits(&decision.bandwidth, *id, b, ctx.budget.total_bandwidth) {
            admit(ctx, &mut decision, *id, b)?;
        }
    }
    Ok(decision)
}

fn admit(ctx: &SelectionContext<'_>, decision: &mut ScheduleDecision, id: ClientId, b: f64) -> Result<()> {
    decision.selected.push(id);
    decision.bandwidth.insert(id, b);
    let set: BTreeSet<ClientId> = decision.selected.iter().copied().collect();
    let terms = objective_terms(&set, ctx.reports, ctx.global, ctx.weights, ctx.sigma_hat, ctx.batch, ctx.lambda)?;
    decision.objective_trace.push(terms.total());
    decision.terms = Some(terms);
    Ok(())
}

/// Quadratic class imbalance `Σ_c (p^(c) − t^(c))²` against the uniform
/// distribution `t` over the classes present in `global`.
pub fn qcid(aggregate: &ClassDistribution, global: &ClassDistribution) -> f64 {
    let present = global.support().count().max(1) as f64;
    let len = aggregate.len().max(global.len());
    (0..len)
        .map(|c| {
            let target = if global.get(c) > 0.0 { 1.0 / present } else { 0.0 };
            (aggregate.get(c) - target).powi(2)
        })
        .sum()
}

/// Grows the set one client at a time, always taking the fitting client
/// that leaves the aggregate most class-balanced.
fn balanced_select(
    ctx: &SelectionContext<'_>,
    feasible: &BTreeMap<ClientId, f64>,
    order: Vec<ClientId>,
) -> Result<ScheduleDecision> {
    let mut decision = ScheduleDecision::default();
    let mut pool = order;
    loop {
        pool.retain(|id| fits(&decision.bandwidth, *id, feasible[id], ctx.budget.total_bandwidth));
        let mut best: Option<(usize, f64)> = None;
        for (i, id) in pool.iter().enumerate() {
            let parts = decision.selected.iter().chain(std::iter::once(id)).map(|m| {
                let r = &ctx.reports[m];
                (&r.distribution_now, r.sample_count)
            });
            let score = qcid(&ClassDistribution::mixture(parts)?, ctx.global);
            if best.is_none_or(|(_, s)| score < s) {
                best = Some((i, score));
            }
        }
        let Some((i, _)) = best else { break };
        let id = pool.remove(i);
        admit(ctx, &mut decision, id, feasible[&id])?;
    }
    Ok(decision)
}
