//! Frame and round loop: broadcast, local training, reports, scheduling,
//! upload, aggregation and estimator updates.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastream::{global_distribution, ClientDatasetState, ScenarioSpec};
use crate::distributions::{v_bound_terms, ClassDistribution, ClassGradientNorms, VBoundTerms};
use crate::error::{invalid, Error, Result};
use crate::learning::{aggregate, local_loss, local_train, model_accuracy, GradientStats, LabeledSample, ModelKind, ModelSpec, ParameterVector, TrainingConfig};
use crate::scheduler::{
    estimate_class_norms, global_class_gradients, lambda_at, select, sum_bandwidth, ClientReport, ObjectiveTerms,
    Policy, SchedulerConfig, SelectionContext, SigmaPolicy,
};
use crate::seed::{self, Stream};
use crate::wireless::{
    draw_distance_km, path_gain, round_delay, sample_compute_delay, ChannelRealization, ComputeProfile, LinkBudget,
    RadioProfile,
};
use crate::ClientId;

/// Cell geometry and per-client radio/compute parameters shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WirelessSettings {
    pub cell_radius_m: f64,
    pub tx_power_dbm: f64,
    pub noise_psd_dbm_hz: f64,
    pub shadow_sigma_db: f64,
    pub carrier_ghz: f64,
    pub compute: ComputeProfile,
}

/// Smoothness and gradient-bound constants for the logged convergence terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub beta: f64,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub scenario: ScenarioSpec,
    pub model: ModelKind,
    pub training: TrainingConfig,
    /// `rounds_per_frame` here is ignored; each frame uses its own entry below.
    pub scheduler: SchedulerConfig,
    pub wireless: WirelessSettings,
    pub budget: LinkBudget,
    pub diagnostics: Diagnostics,
    pub policy: Policy,
    /// `K_l` per frame; a zero entry skips training in that frame.
    pub rounds_per_frame: Vec<usize>,
    pub seed: u64,
    /// Held-out samples over every class; each frame scores only the classes seen so far.
    pub eval_dataset: Vec<LabeledSample>,
}

impl ExperimentPlan {
    pub fn frames(&self) -> usize {
        self.scenario.num_frames()
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.training.validate()?;
        SchedulerConfig { rounds_per_frame: 1, ..self.scheduler }.validate()?;
        if self.rounds_per_frame.len() != self.frames() {
            return Err(invalid(format!(
                "rounds_per_frame has {} entries for {} frames",
                self.rounds_per_frame.len(),
                self.frames()
            )));
        }
        let b = &self.budget;
        if !(b.model_bits > 0.0 && b.deadline > 0.0 && b.total_bandwidth > 0.0) {
            return Err(invalid("model_bits, deadline and total_bandwidth must be positive"));
        }
        if !(self.diagnostics.beta > 0.0 && self.diagnostics.g > 0.0) {
            return Err(invalid("diagnostics beta and g must be positive"));
        }
        Ok(())
    }
}

/// One aggregation round as written to the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub frame: usize,
    /// `k` within the frame, from 1.
    pub round: usize,
    /// Rounds completed since the start of the experiment, this one included.
    pub global_round: u32,
    pub selected: Vec<ClientId>,
    pub bandwidths: BTreeMap<ClientId, f64>,
    pub round_delay: f64,
    pub global_loss: f64,
    pub test_accuracy: f64,
    pub objective_terms: Option<ObjectiveTerms>,
    pub lambda: f64,
    pub sigma_hat: f64,
    pub v_bound_terms: Option<VBoundTerms>,
}

struct Client {
    radio: RadioProfile,
}

/// A prepared experiment: realized datasets, client placement and the
/// state carried between frames.
pub struct Simulation<'a> {
    plan: &'a ExperimentPlan,
    spec: ModelSpec,
    frames: Vec<BTreeMap<ClientId, ClientDatasetState>>,
    clients: BTreeMap<ClientId, Client>,
    weights: ClassGradientNorms,
    rounds_done: u32,
}

impl<'a> Simulation<'a> {
    pub fn new(plan: &'a ExperimentPlan) -> Result<Self> {
        plan.validate()?;
        let generator = plan.scenario.generator()?;
        let spec = ModelSpec { kind: plan.model, input_dim: generator.dim(), num_classes: plan.scenario.num_classes() };
        let frames = plan.scenario.realize()?;
        let w = &plan.wireless;
        let clients = (0..plan.scenario.num_clients as u32)
            .map(|n| {
                let distance_km = draw_distance_km(w.cell_radius_m, seed::derive(plan.seed, Stream::Position, &[n as u64]));
                let radio = RadioProfile {
                    tx_power_dbm: w.tx_power_dbm,
                    distance_km,
                    shadow_sigma_db: w.shadow_sigma_db,
                    noise_psd_dbm_hz: w.noise_psd_dbm_hz,
                    carrier_ghz: w.carrier_ghz,
                };
                (ClientId(n), Client { radio })
            })
            .collect();
        Ok(Self { plan, spec, frames, clients, weights: ClassGradientNorms::filled(0, 1.0), rounds_done: 0 })
    }

    pub fn model_spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn initial_model(&self) -> ParameterVector {
        self.spec.init(seed::derive(self.plan.seed, Stream::ModelInit, &[]))
    }

    /// Runs frame `frame` from `initial_model` and returns the lowest-loss
    /// model seen in the frame (the starting model included) with one record
    /// per round. `on_round` sees each record as soon as it exists.
    pub fn run_frame(
        &mut self,
        frame: usize,
        initial_model: ParameterVector,
        on_round: &mut dyn FnMut(&RoundRecord) -> Result<()>,
    ) -> Result<(ParameterVector, Vec<RoundRecord>)> {
        let plan = self.plan;
        let k_l = *plan
            .rounds_per_frame
            .get(frame)
            .ok_or_else(|| invalid(format!("frame {frame} is not in the plan")))?;
        let datasets = &self.frames[frame];
        let previous = if frame == 0 { datasets } else { &self.frames[frame - 1] };
        let global = global_distribution(datasets)?;
        let pooled: Vec<LabeledSample> = datasets.values().flat_map(|d| d.samples.iter().cloned()).collect();
        let seen = plan.scenario.classes_seen(frame);
        let eval: Vec<LabeledSample> =
            plan.eval_dataset.iter().filter(|s| seen.contains(&s.label)).cloned().collect();
        let counts: BTreeMap<ClientId, usize> = datasets.iter().map(|(id, d)| (*id, d.len())).collect();
        let total_samples: usize = counts.values().sum();
        let active: Vec<ClientId> = datasets.iter().filter(|(_, d)| !d.is_empty()).map(|(id, _)| *id).collect();
        let scheduler = SchedulerConfig { rounds_per_frame: k_l.max(1), ..plan.scheduler };

        let mut model = initial_model;
        let mut best = (local_loss(&self.spec, &model, &pooled)?, model.clone());
        let mut records = Vec::with_capacity(k_l);

        for k in 1..=k_l {
            let global_round = self.rounds_done + 1;
            let training = TrainingConfig {
                learning_rate: plan.training.learning_rate_after(self.rounds_done),
                ..plan.training
            };
            let tags = |n: u32| [frame as u64, k as u64, n as u64];
            let trained: Vec<(ClientId, ParameterVector, GradientStats)> = active
                .par_iter()
                .map(|id| {
                    let s = seed::derive(plan.seed, Stream::Training, &tags(id.0));
                    let (w, stats) = local_train(&self.spec, &model, &datasets[id].samples, &training, s)?;
                    Ok((*id, w, stats))
                })
                .collect::<Result<_>>()?;

            let mut reports = BTreeMap::new();
            let mut compute_delays = BTreeMap::new();
            let mut channels = BTreeMap::new();
            for (id, _, stats) in &trained {
                let radio = self.clients[id].radio;
                let cp = sample_compute_delay(
                    &plan.wireless.compute,
                    plan.training.tau,
                    plan.training.batch_size,
                    seed::derive(plan.seed, Stream::ComputeDelay, &tags(id.0)),
                );
                let channel: ChannelRealization =
                    path_gain(&radio, seed::derive(plan.seed, Stream::Shadowing, &tags(id.0)));
                compute_delays.insert(*id, cp);
                channels.insert(*id, channel);
                reports.insert(
                    *id,
                    ClientReport {
                        client: *id,
                        distribution_now: datasets[id].distribution.clone(),
                        distribution_prev_frame: previous[id].distribution.clone(),
                        sample_count: counts[id],
                        sigma_hat: stats.variance_estimate,
                        compute_delay: cp,
                        channel,
                        radio,
                        local_loss: stats.initial_loss,
                        gradient_norm: stats.full_gradient_norm(),
                    },
                );
            }

            let sigma_hat = match plan.scheduler.sigma_scale_policy {
                SigmaPolicy::Estimated => reports
                    .values()
                    .map(|r| r.sample_count as f64 / total_samples as f64 * r.sigma_hat)
                    .sum(),
                SigmaPolicy::Fixed(s) => s,
            };
            let weights = self.weights.padded_with(global.len(), 1.0);
            let lambda = plan.policy.effective_lambda(lambda_at(&scheduler, k)?);
            let ctx = SelectionContext {
                reports: &reports,
                global: &global,
                weights: &weights,
                sigma_hat,
                batch: plan.training.batch_size,
                lambda,
                budget: &plan.budget,
            };
            let decision = select(plan.policy, &ctx, seed::derive(plan.seed, Stream::Policy, &[frame as u64, k as u64]))?;

            let used = sum_bandwidth(&decision.bandwidth);
            if used > plan.budget.total_bandwidth {
                return Err(Error::ConstraintViolation(format!(
                    "frame {frame} round {k}: bandwidth {used} Hz exceeds {} Hz",
                    plan.budget.total_bandwidth
                )));
            }
            let radios: BTreeMap<ClientId, RadioProfile> =
                decision.selected.iter().map(|id| (*id, self.clients[id].radio)).collect();
            let delay = round_delay(&decision.selected, &compute_delays, &decision.bandwidth, &radios, &channels, &plan.budget)?;
            if delay > plan.budget.deadline {
                return Err(Error::ConstraintViolation(format!(
                    "frame {frame} round {k}: round delay {delay} s exceeds {} s",
                    plan.budget.deadline
                )));
            }

            let mut v_bound = None;
            if !decision.is_empty() {
                let chosen: BTreeSet<ClientId> = decision.selected.iter().copied().collect();
                let mut models = BTreeMap::new();
                let mut per_class = BTreeMap::new();
                for (id, w, stats) in trained {
                    if chosen.contains(&id) {
                        models.insert(id, w);
                        per_class.insert(id, stats.per_class_gradient);
                    }
                }
                model = aggregate(&models, &counts)?;
                if !model.is_finite() {
                    return Err(invalid(format!("frame {frame} round {k}: model diverged")));
                }
                let dists: BTreeMap<ClientId, ClassDistribution> =
                    chosen.iter().map(|id| (*id, datasets[id].distribution.clone())).collect();
                let global_pc = global_class_gradients(&per_class, &dists, &counts);
                self.weights = estimate_class_norms(&per_class, &global_pc, &dists, &global, &weights);
                let terms = decision.terms.expect("nonempty decisions carry terms");
                v_bound = Some(v_bound_terms(
                    training.tau,
                    training.learning_rate,
                    plan.diagnostics.beta,
                    plan.diagnostics.g,
                    sigma_hat,
                    training.batch_size,
                    chosen.len(),
                    terms.divergence_bound,
                )?);
            }

            let global_loss = local_loss(&self.spec, &model, &pooled)?;
            if global_loss < best.0 {
                best = (global_loss, model.clone());
            }
            let test_accuracy = if eval.is_empty() { 0.0 } else { model_accuracy(&self.spec, &model, &eval)? };
            self.rounds_done += 1;
            let record = RoundRecord {
                frame,
                round: k,
                global_round,
                selected: decision.selected,
                bandwidths: decision.bandwidth,
                round_delay: delay,
                global_loss,
                test_accuracy,
                objective_terms: decision.terms,
                lambda,
                sigma_hat,
                v_bound_terms: v_bound,
            };
            on_round(&record)?;
            records.push(record);
        }
        Ok((best.1, records))
    }
}

/// Runs every frame in order, starting each from the previous frame's
/// lowest-loss model.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<Vec<RoundRecord>> {
    run_experiment_with(plan, &mut |_| Ok(()))
}

/// [`run_experiment`] that also hands each record to `on_round` as it is produced.
pub fn run_experiment_with(
    plan: &ExperimentPlan,
    on_round: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<Vec<RoundRecord>> {
    let mut sim = Simulation::new(plan)?;
    let mut model = sim.initial_model();
    let mut records = Vec::new();
    for frame in 0..plan.frames() {
        let (best, mut recs) = sim.run_frame(frame, model, on_round)?;
        model = best;
        records.append(&mut recs);
    }
    Ok(records)
}
