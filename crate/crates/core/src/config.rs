//! Experiment configuration files.
//!
//! A config is a TOML document. An optional top-level `extends = "<path>"`
//! names a parent file (relative to the child) whose tables are merged
//! underneath; the child wins key by key. Every key has a default, so an
//! empty file describes the ten-class streaming experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datastream::{evaluation_set, ArrivalEvent, GeneratorConfig, ScenarioSpec};
use crate::error::{Error, Result};
use crate::learning::{ModelKind, TrainingConfig};
use crate::orchestrator::{Diagnostics, ExperimentPlan, WirelessSettings};
use crate::scheduler::{Policy, SchedulerConfig, SigmaPolicy};
use crate::seed::{self, Stream};
use crate::wireless::{ComputeProfile, LinkBudget};
use crate::ClientId;

const MAX_EXTENDS_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub model: ModelConfig,
    pub training: TrainingSection,
    pub scheduler: SchedulerSection,
    pub wireless: WirelessSection,
    pub diagnostics: DiagnosticsSection,
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// `ten_class`, `fifty_class` or `custom`.
    pub preset: String,
    pub capacity: usize,
    /// Samples each chosen client collects when a preset introduces a class.
    pub new_samples: usize,
    pub generator: GeneratorConfig,
    /// Custom scenarios only.
    pub num_clients: usize,
    pub frames: usize,
    pub initial: Vec<InitialHolding>,
    pub arrivals: Vec<ArrivalConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            preset: "ten_class".into(),
            capacity: 750,
            new_samples: 375,
            generator: GeneratorConfig::default(),
            num_clients: 0,
            frames: 1,
            initial: Vec::new(),
            arrivals: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialHolding {
    pub client: u32,
    /// `[class, count]` pairs.
    pub classes: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrivalConfig {
    pub frame: usize,
    pub client: u32,
    pub class: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `softmax` or `mlp`.
    pub kind: String,
    pub hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { kind: "softmax".into(), hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub tau: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub momentum: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { tau: 5, batch_size: 32, learning_rate: 0.01, lr_decay: 0.9992, momentum: 0.5 }
    }
}

/// `"estimated"` or a fixed nonnegative number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSetting {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub lambda0: f64,
    pub sigma: SigmaSetting,
    /// One entry per frame.
    pub rounds_per_frame: Vec<usize>,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        Self { lambda0: 2.0, sigma: SigmaSetting::Named("estimated".into()), rounds_per_frame: vec![100, 100] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WirelessSection {
    pub cell_radius_m: f64,
    pub total_bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_psd_dbm_hz: f64,
    pub carrier_ghz: f64,
    pub shadow_sigma_db: f64,
    pub min_time_per_sample_ms: f64,
    pub rate_samples_per_ms: f64,
    pub deadline_s: f64,
    pub model_bits: f64,
}

impl Default for WirelessSection {
    fn default() -> Self {
        Self {
            cell_radius_m: 250.0,
            total_bandwidth_hz: 20e6,
            tx_power_dbm: 23.0,
            noise_psd_dbm_hz: -174.0,
            carrier_ghz: 3.5,
            shadow_sigma_db: 8.0,
            min_time_per_sample_ms: 0.5,
            rate_samples_per_ms: 2.0,
            deadline_s: 1.0,
            model_bits: 1.79e7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub beta: f64,
    pub g: f64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self { beta: 1.0, g: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub test_per_class: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { test_per_class: 200 }
    }
}

/// Reads `path`, resolving `extends` chains.
pub fn load_table(path: &Path) -> Result<Table> {
    load_layered(path, &mut Vec::new())
}

fn load_layered(path: &Path, chain: &mut Vec<PathBuf>) -> Result<Table> {
    let canonical = path.canonicalize().map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if chain.contains(&canonical) || chain.len() >= MAX_EXTENDS_DEPTH {
        return Err(config_err(format!("extends: cycle or excessive depth at {}", path.display())));
    }
    chain.push(canonical);
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut table: Table = text.parse().map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let parent = match table.remove("extends") {
        None => None,
        Some(Value::String(p)) => Some(path.parent().unwrap_or(Path::new(".")).join(p)),
        Some(_) => return Err(config_err("extends: must be a path string")),
    };
    let merged = match parent {
        Some(p) => {
            let mut base = load_layered(&p, chain)?;
            merge(&mut base, table);
            base
        }
        None => table,
    };
    chain.pop();
    Ok(merged)
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(vec![msg.into()])
}

impl ExperimentConfig {
    /// Loads, layers and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let cfg = Self::from_table(load_table(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        Self::deserialize(Value::Table(table)).map_err(|e| config_err(e.to_string().trim().to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        Self::from_table(table)
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Every invariant violation, each prefixed with its key path.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut positive = |key: &str, x: f64| {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{key}: must be positive (got {x})"));
            }
        };
        let w = &self.wireless;
        positive("wireless.cell_radius_m", w.cell_radius_m);
        positive("wireless.total_bandwidth_hz", w.total_bandwidth_hz);
        positive("wireless.min_time_per_sample_ms", w.min_time_per_sample_ms);
        positive("wireless.rate_samples_per_ms", w.rate_samples_per_ms);
        positive("wireless.deadline_s", w.deadline_s);
        positive("wireless.model_bits", w.model_bits);
        positive("wireless.carrier_ghz", w.carrier_ghz);
        positive("training.learning_rate", self.training.learning_rate);
        positive("training.lr_decay", self.training.lr_decay);
        positive("diagnostics.beta", self.diagnostics.beta);
        positive("diagnostics.g", self.diagnostics.g);
        for (key, x) in [
            ("wireless.tx_power_dbm", w.tx_power_dbm),
            ("wireless.noise_psd_dbm_hz", w.noise_psd_dbm_hz),
        ] {
            if !x.is_finite() {
                v.push(format!("{key}: must be finite"));
            }
        }
        if !(w.shadow_sigma_db >= 0.0 && w.shadow_sigma_db.is_finite()) {
            v.push("wireless.shadow_sigma_db: must be nonnegative".into());
        }
        let t = &self.training;
        if t.tau == 0 {
            v.push("training.tau: must be positive".into());
        }
        if t.batch_size == 0 {
            v.push("training.batch_size: must be positive".into());
        }
        if t.lr_decay > 1.0 {
            v.push("training.lr_decay: must not exceed 1".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            v.push("training.momentum: must lie in [0, 1)".into());
        }
        let s = &self.scheduler;
        if !(s.lambda0 >= 0.0 && s.lambda0.is_finite()) {
            v.push("scheduler.lambda0: must be nonnegative".into());
        }
        match &s.sigma {
            SigmaSetting::Fixed(x) if !(*x >= 0.0 && x.is_finite()) => {
                v.push("scheduler.sigma: fixed value must be nonnegative".into())
            }
            SigmaSetting::Named(n) if n != "estimated" => {
                v.push(format!("scheduler.sigma: expected \"estimated\" or a number, got \"{n}\""))
            }
            _ => {}
        }
        if s.rounds_per_frame.contains(&0) {
            v.push("scheduler.rounds_per_frame: entries must be positive".into());
        }
        match self.model.kind.as_str() {
            "softmax" => {}
            "mlp" if self.model.hidden > 0 => {}
            "mlp" => v.push("model.hidden: must be positive".into()),
            other => v.push(format!("model.kind: unknown model `{other}` (expected softmax or mlp)")),
        }
        if self.evaluation.test_per_class == 0 {
            v.push("evaluation.test_per_class: must be positive".into());
        }
        let g = &self.scenario.generator;
        match g.kind.as_str() {
            "gaussian" => {
                if g.dim == 0 {
                    v.push("scenario.generator.dim: must be positive".into());
                }
                if !(g.noise_std >= 0.0 && g.noise_std.is_finite()) {
                    v.push("scenario.generator.noise_std: must be nonnegative".into());
                }
                if !(g.separation >= 0.0 && g.separation.is_finite()) {
                    v.push("scenario.generator.separation: must be nonnegative".into());
                }
            }
            "sample_file" if g.path.is_none() => v.push("scenario.generator.path: required for sample_file".into()),
            "sample_file" => {}
            other => v.push(format!("scenario.generator.kind: unknown generator `{other}`")),
        }
        match self.scenario_spec(0) {
            Ok(spec) => {
                for msg in spec.violations() {
                    if !v.contains(&msg) && !msg.starts_with("scenario.generator.kind") {
                        v.push(msg);
                    }
                }
                if s.rounds_per_frame.len() != spec.num_frames() {
                    v.push(format!(
                        "scheduler.rounds_per_frame: {} entries for {} frames",
                        s.rounds_per_frame.len(),
                        spec.num_frames()
                    ));
                }
            }
            Err(e) => v.push(e),
        }
        v
    }

    /// The scenario for one experiment seed.
    pub fn scenario_spec(&self, seed_: u64) -> std::result::Result<ScenarioSpec, String> {
        let sc = &self.scenario;
        let gen = sc.generator.clone();
        match sc.preset.as_str() {
            "ten_class" | "fifty_class" => {
                if sc.capacity == 0 || sc.new_samples == 0 || sc.new_samples > sc.capacity {
                    return Err("scenario.new_samples: must lie in [1, scenario.capacity]".into());
                }
                Ok(if sc.preset == "ten_class" {
                    ScenarioSpec::ten_class_preset(sc.capacity, sc.new_samples, gen, seed_)
                } else {
                    ScenarioSpec::fifty_class_preset(sc.capacity, sc.new_samples, gen, seed_)
                })
            }
            "custom" => {
                let mut initial: BTreeMap<ClientId, Vec<(usize, usize)>> = BTreeMap::new();
                for h in &sc.initial {
                    initial.entry(ClientId(h.client)).or_default().extend(h.classes.iter().copied());
                }
                let mut frames = vec![Vec::new(); sc.frames];
                for a in &sc.arrivals {
                    let event = ArrivalEvent {
                        frame: a.frame,
                        client: ClientId(a.client),
                        new_class: a.class,
                        new_sample_count: a.count,
                    };
                    match frames.get_mut(a.frame) {
                        Some(f) => f.push(event),
                        None => return Err(format!("scenario.arrivals: frame {} beyond scenario.frames", a.frame)),
                    }
                }
                Ok(ScenarioSpec {
                    num_clients: sc.num_clients,
                    capacity: sc.capacity,
                    initial_assignment: initial,
                    frames,
                    generator: gen,
                    seed: seed_,
                })
            }
            other => Err(format!("scenario.preset: unknown preset `{other}` (expected ten_class, fifty_class or custom)")),
        }
    }

    /// A runnable plan for one (policy, seed) pair.
    pub fn plan(&self, policy: Policy, seed_: u64) -> Result<ExperimentPlan> {
        self.validate()?;
        let scenario = self.scenario_spec(seed_).map_err(|e| Error::Config(vec![e]))?;
        let generator = scenario.generator()?;
        let classes: BTreeSet<usize> = (0..scenario.num_classes()).collect();
        let eval_dataset = evaluation_set(
            &generator,
            &classes,
            self.evaluation.test_per_class,
            seed::derive(seed_, Stream::Evaluation, &[]),
        )?;
        let w = &self.wireless;
        let t = &self.training;
        Ok(ExperimentPlan {
            scenario,
            model: match self.model.kind.as_str() {
                "mlp" => ModelKind::Mlp { hidden: self.model.hidden },
                _ => ModelKind::Softmax,
            },
            training: TrainingConfig {
                tau: t.tau,
                batch_size: t.batch_size,
                learning_rate: t.learning_rate,
                lr_decay: t.lr_decay,
                momentum: t.momentum,
            },
            scheduler: SchedulerConfig {
                lambda0: self.scheduler.lambda0,
                sigma_scale_policy: match self.scheduler.sigma {
                    SigmaSetting::Fixed(x) => SigmaPolicy::Fixed(x),
                    SigmaSetting::Named(_) => SigmaPolicy::Estimated,
                },
                rounds_per_frame: self.scheduler.rounds_per_frame.first().copied().unwrap_or(1),
            },
            wireless: WirelessSettings {
                cell_radius_m: w.cell_radius_m,
                tx_power_dbm: w.tx_power_dbm,
                noise_psd_dbm_hz: w.noise_psd_dbm_hz,
                shadow_sigma_db: w.shadow_sigma_db,
                carrier_ghz: w.carrier_ghz,
                compute: ComputeProfile {
                    min_time_per_sample: w.min_time_per_sample_ms * 1e-3,
                    rate_param: w.rate_samples_per_ms * 1e3,
                },
            },
            budget: LinkBudget { model_bits: w.model_bits, deadline: w.deadline_s, total_bandwidth: w.total_bandwidth_hz },
            diagnostics: Diagnostics { beta: self.diagnostics.beta, g: self.diagnostics.g },
            policy,
            rounds_per_frame: self.scheduler.rounds_per_frame.clone(),
            seed: seed_,
            eval_dataset,
        })
    }
}
