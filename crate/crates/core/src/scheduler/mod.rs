//! Client selection and bandwidth allocation.
//!
//! FedTeddi minimizes `σ̂/√(|S|·b) + U(S)` where `U` trades the collective
//! divergence of the scheduled set against a λ-weighted bonus for clients
//! whose data drifted since the previous frame.

mod baselines;
mod estimator;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{temporal_drift_bound, weighted_emd, ClassDistribution, ClassGradientNorms};
use crate::error::{invalid, Error, Result};
use crate::wireless::{allocate_bandwidth, ChannelRealization, LinkBudget, RadioProfile};
use crate::ClientId;

pub use baselines::qcid;
pub use estimator::{estimate_class_norms, global_class_gradients};

/// How the σ̂ scale entering the objective is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaPolicy {
    /// α-weighted mean of the clients' first-batch estimates.
    Estimated,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub lambda0: f64,
    pub sigma_scale_policy: SigmaPolicy,
    /// `K_l` of the frame being scheduled.
    pub rounds_per_frame: usize,
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(invalid("lambda0 must be finite and nonnegative"));
        }
        if let SigmaPolicy::Fixed(s) = self.sigma_scale_policy {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid("fixed sigma must be finite and nonnegative"));
            }
        }
        if self.rounds_per_frame == 0 {
            return Err(invalid("rounds_per_frame must be positive"));
        }
        Ok(())
    }
}

/// `λ_k = λ_0·(1 − k/K_l)` for `k ∈ [1, K_l]`.
pub fn lambda_at(cfg: &SchedulerConfig, round: usize) -> Result<f64> {
    let k_l = cfg.rounds_per_frame;
    if round == 0 || round > k_l {
        return Err(invalid(format!("round {round} outside [1, {k_l}]")));
    }
    Ok(cfg.lambda0 * (1.0 - round as f64 / k_l as f64))
}

/// What a client tells the server at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub client: ClientId,
    pub distribution_now: ClassDistribution,
    pub distribution_prev_frame: ClassDistribution,
    pub sample_count: usize,
    pub sigma_hat: f64,
    pub compute_delay: f64,
    pub channel: ChannelRealization,
    pub radio: RadioProfile,
    /// Local loss at the round-start model.
    pub local_loss: f64,
    /// Norm of the local full-batch gradient at the round-start model.
    pub gradient_norm: f64,
}

/// Objective components at a scheduled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub sampling_variance: f64,
    pub divergence_bound: f64,
    pub drift_bonus: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.sampling_variance + self.divergence_bound - self.drift_bonus
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScheduleDecision {
    /// Admission order.
    pub selected: Vec<ClientId>,
    pub bandwidth: BTreeMap<ClientId, f64>,
    pub objective_trace: Vec<f64>,
    /// `None` when nobody was scheduled.
    pub terms: Option<ObjectiveTerms>,
}

impl ScheduleDecision {
    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn total_bandwidth(&self) -> f64 {
        sum_bandwidth(&self.bandwidth)
    }
}

/// Bandwidth total in ascending client order, the order every check uses.
pub fn sum_bandwidth(bandwidth: &BTreeMap<ClientId, f64>) -> f64 {
    bandwidth.values().sum()
}

/// Everything a policy may look at when choosing a round's clients.
#[derive(Debug, Clone, Copy)]
pub struct SelectionContext<'a> {
    pub reports: &'a BTreeMap<ClientId, ClientReport>,
    pub global: &'a ClassDistribution,
    pub weights: &'a ClassGradientNorms,
    pub sigma_hat: f64,
    pub batch: usize,
    pub lambda: f64,
    pub budget: &'a LinkBudget,
}

fn report<'a>(reports: &'a BTreeMap<ClientId, ClientReport>, id: &ClientId) -> Result<&'a ClientReport> {
    reports.get(id).ok_or_else(|| invalid(format!("no report for client {id}")))
}

/// `U(S) = Σ_c |Σ_n α_n p_n^(c) − p^(c)|·L^(c) − λ·Σ_n α_n·drift_n`.
/// The empty set has a zero aggregate, so `U(∅) = Σ_c p^(c)·L^(c)`.
pub fn unified_objective(
    selected: &BTreeSet<ClientId>,
    reports: &BTreeMap<ClientId, ClientReport>,
    global: &ClassDistribution,
    weights: &ClassGradientNorms,
    lambda: f64,
) -> Result<f64> {
    let (div, bonus) = divergence_and_bonus(selected.iter(), reports, global, weights, lambda)?;
    Ok(div - bonus)
}

fn divergence_and_bonus<'a>(
    selected: impl Iterator<Item = &'a ClientId> + Clone,
    reports: &BTreeMap<ClientId, ClientReport>,
    global: &ClassDistribution,
    weights: &ClassGradientNorms,
    lambda: f64,
) -> Result<(f64, f64)> {
    let mut parts = Vec::new();
    for id in selected.clone() {
        let r = report(reports, id)?;
        if r.sample_count == 0 {
            return Err(invalid(format!("client {id} reports zero samples")));
        }
        parts.push(r);
    }
    if parts.is_empty() {
        return Ok((weighted_emd(&ClassDistribution::empty(global.len()), global, weights), 0.0));
    }
    let total: usize = parts.iter().map(|r| r.sample_count).sum();
    let aggregate = ClassDistribution::mixture(parts.iter().map(|r| (&r.distribution_now, r.sample_count)))?;
    let bonus: f64 = parts
        .iter()
        .map(|r| {
            let alpha = r.sample_count as f64 / total as f64;
            alpha * temporal_drift_bound(&r.distribution_now, &r.distribution_prev_frame, weights)
        })
        .sum();
    Ok((weighted_emd(&aggregate, global, weights), lambda * bonus))
}

/// Objective terms of a nonempty set.
pub fn objective_terms(
    selected: &BTreeSet<ClientId>,
    reports: &BTreeMap<ClientId, ClientReport>,
    global: &ClassDistribution,
    weights: &ClassGradientNorms,
    sigma_hat: f64,
    batch: usize,
    lambda: f64,
) -> Result<ObjectiveTerms> {
    if selected.is_empty() || batch == 0 {
        return Err(invalid("objective terms need a nonempty set and a positive batch"));
    }
    let (divergence_bound, drift_bonus) = divergence_and_bonus(selected.iter(), reports, global, weights, lambda)?;
    Ok(ObjectiveTerms {
        sampling_variance: sigma_hat / ((selected.len() * batch) as f64).sqrt(),
        divergence_bound,
        drift_bonus,
    })
}

/// Minimum deadline-feasible bandwidth per client; clients that cannot meet
/// the deadline at any bandwidth are left out.
pub fn feasible_bandwidths(ctx: &SelectionContext<'_>) -> Result<BTreeMap<ClientId, f64>> {
    let mut out = BTreeMap::new();
    for (id, r) in ctx.reports {
        match allocate_bandwidth(r.compute_delay, &r.radio, &r.channel, ctx.budget) {
            Ok(b) if b <= ctx.budget.total_bandwidth => {
                out.insert(*id, b);
            }
            Ok(_) | Err(Error::InfeasibleClient(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn fits(allocated: &BTreeMap<ClientId, f64>, id: ClientId, b: f64, total: f64) -> bool {
    let mut trial = allocated.clone();
    trial.insert(id, b);
    sum_bandwidth(&trial) <= total
}

/// Greedy P3 solver: repeatedly takes the client with the smallest
/// `U(S∪{n}) − U(S)` (ties to the lowest id), stops at the first one whose
/// admission would not lower `σ̂/√(|S|b) + U(S)`, and drops candidates that no
/// longer fit the bandwidth. The first feasible client is always admitted.
pub fn greedy_select(ctx: &SelectionContext<'_>) -> Result<ScheduleDecision> {
    if ctx.reports.is_empty() {
        return Err(invalid("no client reports"));
    }
    if ctx.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut pool = feasible_bandwidths(ctx)?;
    let mut decision = ScheduleDecision::default();
    let mut set = BTreeSet::new();
    let mut current = f64::INFINITY;
    let total = ctx.budget.total_bandwidth;

    while !pool.is_empty() {
        let mut best: Option<(ClientId, f64)> = None;
        for id in pool.keys() {
            set.insert(*id);
            let u = unified_objective(&set, ctx.reports, ctx.global, ctx.weights, ctx.lambda)?;
            set.remove(id);
            if best.is_none_or(|(_, bu)| u < bu) {
                best = Some((*id, u));
            }
        }
        let (id, u) = best.expect("pool is nonempty");
        let next = ctx.sigma_hat / (((set.len() + 1) * ctx.batch) as f64).sqrt() + u;
        if !(next <= current) {
            break;
        }
        let b = pool.remove(&id).expect("candidate came from the pool");
        if !fits(&decision.bandwidth, id, b, total) {
            continue;
        }
        set.insert(id);
        decision.selected.push(id);
        decision.bandwidth.insert(id, b);
        decision.objective_trace.push(next);
        current = next;
    }
    if !set.is_empty() {
        decision.terms = Some(objective_terms(
            &set, ctx.reports, ctx.global, ctx.weights, ctx.sigma_hat, ctx.batch, ctx.lambda,
        )?);
    }
    Ok(decision)
}

/// Scheduling policies selectable by id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[serde(rename = "fedteddi")]
    FedTeddi,
    Random,
    BestChannel,
    BestNorm,
    PowerOfChoice,
    PureDrift,
    #[serde(rename = "fedcbs")]
    FedCbs,
    #[serde(rename = "fedcgd")]
    FedCgd,
}

impl Policy {
    pub const ALL: [Policy; 8] = [
        Policy::FedTeddi,
        Policy::Random,
        Policy::BestChannel,
        Policy::BestNorm,
        Policy::PowerOfChoice,
        Policy::PureDrift,
        Policy::FedCbs,
        Policy::FedCgd,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Policy::FedTeddi => "fedteddi",
            Policy::Random => "random",
            Policy::BestChannel => "best_channel",
            Policy::BestNorm => "best_norm",
            Policy::PowerOfChoice => "power_of_choice",
            Policy::PureDrift => "pure_drift",
            Policy::FedCbs => "fedcbs",
            Policy::FedCgd => "fedcgd",
        }
    }

    /// The λ this policy's objective uses; FedCGD ignores drift.
    pub fn effective_lambda(self, lambda: f64) -> f64 {
        match self {
            Policy::FedCgd => 0.0,
            _ => lambda,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Policy::ALL.into_iter().find(|p| p.id() == s).ok_or_else(|| {
            let ids: Vec<&str> = Policy::ALL.iter().map(|p| p.id()).collect();
            invalid(format!("unknown policy `{s}`; valid policies: {}", ids.join(", ")))
        })
    }
}

/// Runs `policy` on one round. `rng_seed` feeds the randomized baselines.
pub fn select(policy: Policy, ctx: &SelectionContext<'_>, rng_seed: u64) -> Result<ScheduleDecision> {
    let lambda = policy.effective_lambda(ctx.lambda);
    let ctx = SelectionContext { lambda, ..*ctx };
    match policy {
        Policy::FedTeddi | Policy::FedCgd => greedy_select(&ctx),
        _ => baselines::baseline_select(policy, &ctx, rng_seed),
    }
}
