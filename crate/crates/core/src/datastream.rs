//! Frame-structured data evolution.
//!
//! Each client holds a storage-capped dataset. At a frame boundary newly
//! collected samples are always kept and old samples are retained uniformly
//! at random to fill the remaining capacity.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distributions::ClassDistribution;
use crate::error::{invalid, Error, Result};
use crate::learning::LabeledSample;
use crate::seed::{self, Stream};
use crate::ClientId;

/// New samples of one class reaching one client at the start of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrivalEvent {
    pub frame: usize,
    pub client: ClientId,
    pub new_class: usize,
    pub new_sample_count: usize,
}

/// Generator parameters as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// `gaussian` or `sample_file`.
    pub kind: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Norm of each class mean.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Seed for the class means; shared across experiment seeds so every
    /// run sees the same task.
    #[serde(default)]
    pub means_seed: u64,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_dim() -> usize {
    32
}
fn default_separation() -> f64 {
    3.0
}
fn default_noise() -> f64 {
    1.0
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: "gaussian".into(),
            dim: default_dim(),
            separation: default_separation(),
            noise_std: default_noise(),
            means_seed: 0,
            path: None,
        }
    }
}

/// Class-conditional feature source. The law of each class never changes.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureGenerator {
    Gaussian { means: Vec<Vec<f64>>, noise_std: f64 },
    /// Samples drawn with replacement from per-class pools read from a file.
    Pools { dim: usize, pools: BTreeMap<usize, Vec<Vec<f64>>> },
}

impl FeatureGenerator {
    pub fn from_config(cfg: &GeneratorConfig, num_classes: usize) -> Result<Self> {
        match cfg.kind.as_str() {
            "gaussian" => {
                if cfg.dim == 0 || !(cfg.noise_std >= 0.0) || !(cfg.separation >= 0.0) {
                    return Err(invalid("gaussian generator needs dim >= 1, separation >= 0, noise_std >= 0"));
                }
                Ok(Self::gaussian(num_classes, cfg.dim, cfg.separation, cfg.noise_std, cfg.means_seed))
            }
            "sample_file" => {
                let path = cfg
                    .path
                    .as_ref()
                    .ok_or_else(|| invalid("sample_file generator needs a path"))?;
                Self::from_sample_file(path)
            }
            other => Err(invalid(format!("unknown generator `{other}` (expected gaussian or sample_file)"))),
        }
    }

    /// Class means are Gaussian directions scaled to norm `separation`.
    pub fn gaussian(num_classes: usize, dim: usize, separation: f64, noise_std: f64, means_seed: u64) -> Self {
        let means = (0..num_classes)
            .map(|c| {
                let mut rng = seed::stream_rng(means_seed, Stream::ClassMeans, &[c as u64]);
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x * separation / n).collect()
            })
            .collect();
        Self::Gaussian { means, noise_std }
    }

    pub fn from_sample_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let (dim, samples) = parse_sample_file(&text)?;
        let mut pools: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for s in samples {
            pools.entry(s.label).or_default().push(s.features);
        }
        Ok(Self::Pools { dim, pools })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { means, .. } => means.first().map_or(0, Vec::len),
            Self::Pools { dim, .. } => *dim,
        }
    }
}

/// Parses `dim,<d>` followed by lines of `d` comma-separated features and an integer label.
pub fn parse_sample_file(text: &str) -> Result<(usize, Vec<LabeledSample>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| invalid("sample file is empty"))?;
    let dim: usize = header
        .trim()
        .strip_prefix("dim,")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| invalid(format!("sample file header must be `dim,<d>`, got `{header}`")))?;
    let mut samples = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 1 {
            return Err(invalid(format!("line {}: expected {} fields, got {}", i + 1, dim + 1, fields.len())));
        }
        let features = fields[..dim]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| invalid(format!("line {}: bad feature value", i + 1)))?;
        let label = fields[dim]
            .parse()
            .map_err(|_| invalid(format!("line {}: bad label `{}`", i + 1, fields[dim])))?;
        samples.push(LabeledSample { features, label });
    }
    Ok((dim, samples))
}

/// Draws `count` samples of `class`.
pub fn generate_samples(class: usize, count: usize, generator: &FeatureGenerator, rng_seed: u64) -> Result<Vec<LabeledSample>> {
    if count == 0 {
        return Err(invalid("sample count must be positive"));
    }
    let mut rng = seed::rng(rng_seed);
    match generator {
        FeatureGenerator::Gaussian { means, noise_std } => {
            let mean = means
                .get(class)
                .ok_or_else(|| invalid(format!("class {class} has no generator mean")))?;
            Ok((0..count)
                .map(|_| LabeledSample {
                    features: mean
                        .iter()
                        .map(|m| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            m + noise_std * z
                        })
                        .collect(),
                    label: class,
                })
                .collect())
        }
        FeatureGenerator::Pools { pools, .. } => {
            let pool = pools
                .get(&class)
                .filter(|p| !p.is_empty())
                .ok_or_else(|| invalid(format!("sample file has no samples of class {class}")))?;
            Ok((0..count)
                .map(|_| LabeledSample { features: pool[rng.random_range(0..pool.len())].clone(), label: class })
                .collect())
        }
    }
}

/// A client's local dataset in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDatasetState {
    pub samples: Vec<LabeledSample>,
    pub distribution: ClassDistribution,
    pub capacity: usize,
}

impl ClientDatasetState {
    pub fn new(samples: Vec<LabeledSample>, capacity: usize) -> Result<Self> {
        if samples.len() > capacity {
            return Err(Error::Scenario(format!("{} samples exceed capacity {capacity}", samples.len())));
        }
        let distribution = histogram(&samples);
        Ok(Self { samples, distribution, capacity })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn histogram(samples: &[LabeledSample]) -> ClassDistribution {
    let len = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; len];
    for s in samples {
        counts[s.label] += 1;
    }
    ClassDistribution::from_counts(&counts)
}

/// Applies one frame's arrivals to a client: all new samples are kept and
/// old samples are uniformly subsampled to fill what capacity remains.
pub fn advance_frame(
    state: &ClientDatasetState,
    events: &[ArrivalEvent],
    generator: &FeatureGenerator,
    rng_seed: u64,
) -> Result<ClientDatasetState> {
    if events.is_empty() {
        return Ok(state.clone());
    }
    let incoming: usize = events.iter().map(|e| e.new_sample_count).sum();
    if incoming > state.capacity {
        return Err(Error::Scenario(format!(
            "{incoming} new samples exceed client capacity {}",
            state.capacity
        )));
    }
    let keep = (state.capacity - incoming).min(state.len());
    let mut rng = seed::rng(rng_seed);
    let mut kept = index::sample(&mut rng, state.len(), keep).into_vec();
    kept.sort_unstable();
    let mut samples: Vec<LabeledSample> = kept.into_iter().map(|i| state.samples[i].clone()).collect();
    for (i, e) in events.iter().enumerate() {
        let s = seed::derive(rng_seed, Stream::Samples, &[i as u64, e.new_class as u64]);
        samples.extend(generate_samples(e.new_class, e.new_sample_count, generator, s)?);
    }
    let distribution = histogram(&samples).padded(state.distribution.len());
    Ok(ClientDatasetState { samples, distribution, capacity: state.capacity })
}

/// Class histogram of the union of all client datasets.
pub fn global_distribution(states: &BTreeMap<ClientId, ClientDatasetState>) -> Result<ClassDistribution> {
    if states.is_empty() {
        return Err(invalid("global distribution of no clients"));
    }
    ClassDistribution::mixture(states.values().map(|s| (&s.distribution, s.len())))
}

/// Which clients get data when, and how it is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub num_clients: usize,
    pub capacity: usize,
    /// Frame-0 holdings: `(class, count)` pairs per client.
    pub initial_assignment: BTreeMap<ClientId, Vec<(usize, usize)>>,
    /// Arrivals applied at the start of each frame; `frames.len()` is the number of frames.
    pub frames: Vec<Vec<ArrivalEvent>>,
    pub generator: GeneratorConfig,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Every violated invariant, each prefixed by a key path.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_clients == 0 {
            out.push("scenario.num_clients: must be positive".into());
        }
        if self.capacity == 0 {
            out.push("scenario.capacity: must be positive".into());
        }
        if self.frames.is_empty() {
            out.push("scenario.frames: at least one frame required".into());
        }
        for (id, holdings) in &self.initial_assignment {
            if id.0 as usize >= self.num_clients {
                out.push(format!("scenario.initial.{id}: client id out of range"));
            }
            let total: usize = holdings.iter().map(|(_, n)| n).sum();
            if total > self.capacity {
                out.push(format!("scenario.initial.{id}: {total} samples exceed capacity {}", self.capacity));
            }
            if holdings.iter().any(|(_, n)| *n == 0) {
                out.push(format!("scenario.initial.{id}: sample counts must be positive"));
            }
        }
        for (l, events) in self.frames.iter().enumerate() {
            let mut per_client: BTreeMap<ClientId, usize> = BTreeMap::new();
            for e in events {
                if e.frame != l {
                    out.push(format!("scenario.frames[{l}]: event tagged with frame {}", e.frame));
                }
                if e.client.0 as usize >= self.num_clients {
                    out.push(format!("scenario.frames[{l}]: client {} out of range", e.client));
                }
                if e.new_sample_count == 0 {
                    out.push(format!("scenario.frames[{l}]: client {} has a zero-sample arrival", e.client));
                }
                *per_client.entry(e.client).or_default() += e.new_sample_count;
            }
            for (c, n) in per_client {
                if n > self.capacity {
                    out.push(format!("scenario.frames[{l}]: client {c} receives {n} samples, capacity {}", self.capacity));
                }
            }
        }
        if self.generator.kind != "gaussian" && self.generator.kind != "sample_file" {
            out.push(format!("scenario.generator.kind: unknown generator `{}`", self.generator.kind));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Scenario(v.join("; ")))
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Size of the model output layer: one past the largest class ever used.
    pub fn num_classes(&self) -> usize {
        let initial = self.initial_assignment.values().flatten().map(|(c, _)| c + 1);
        let later = self.frames.iter().flatten().map(|e| e.new_class + 1);
        initial.chain(later).max().unwrap_or(0)
    }

    /// Classes that have appeared anywhere up to and including `frame`.
    pub fn classes_seen(&self, frame: usize) -> BTreeSet<usize> {
        let mut seen: BTreeSet<usize> = self.initial_assignment.values().flatten().map(|(c, _)| *c).collect();
        for events in self.frames.iter().take(frame + 1) {
            seen.extend(events.iter().map(|e| e.new_class));
        }
        seen
    }

    pub fn generator(&self) -> Result<FeatureGenerator> {
        FeatureGenerator::from_config(&self.generator, self.num_classes())
    }

    /// Frame-0 datasets before any arrivals.
    pub fn initial_states(&self, generator: &FeatureGenerator) -> Result<BTreeMap<ClientId, ClientDatasetState>> {
        self.validate()?;
        let mut states = BTreeMap::new();
        for n in 0..self.num_clients as u32 {
            let id = ClientId(n);
            let mut samples = Vec::new();
            for &(class, count) in self.initial_assignment.get(&id).map_or(&[][..], Vec::as_slice) {
                let s = seed::derive(self.seed, Stream::Samples, &[0, n as u64, class as u64, u64::MAX]);
                samples.extend(generate_samples(class, count, generator, s)?);
            }
            states.insert(id, ClientDatasetState::new(samples, self.capacity)?);
        }
        Ok(states)
    }

    /// Applies frame `frame`'s arrivals to every client.
    pub fn advance(
        &self,
        states: &BTreeMap<ClientId, ClientDatasetState>,
        frame: usize,
        generator: &FeatureGenerator,
    ) -> Result<BTreeMap<ClientId, ClientDatasetState>> {
        let events = self.frames.get(frame).map_or(&[][..], Vec::as_slice);
        states
            .iter()
            .map(|(id, state)| {
                let mine: Vec<ArrivalEvent> = events.iter().filter(|e| e.client == *id).copied().collect();
                let s = seed::derive(self.seed, Stream::Replay, &[frame as u64, id.0 as u64]);
                Ok((*id, advance_frame(state, &mine, generator, s)?))
            })
            .collect()
    }

    /// Datasets at every frame, in order.
    pub fn realize(&self) -> Result<Vec<BTreeMap<ClientId, ClientDatasetState>>> {
        let generator = self.generator()?;
        let mut states = self.initial_states(&generator)?;
        let mut out = Vec::with_capacity(self.num_frames());
        for l in 0..self.num_frames() {
            states = self.advance(&states, l, &generator)?;
            out.push(states.clone());
        }
        Ok(out)
    }

    /// Ten-class layout: 20 one-class and 10 two-class clients over classes
    /// 0–5, where classes 0–2 hold three times the samples of classes 3–5.
    /// At frame 1, 12 randomly chosen clients each receive one of classes 6–9.
    pub fn ten_class_preset(capacity: usize, new_samples: usize, generator: GeneratorConfig, seed_: u64) -> Self {
        const ONE_CLASS: [usize; 20] = [0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 3, 4];
        const TWO_CLASS: [(usize, usize); 10] =
            [(5, 0), (5, 1), (5, 2), (5, 3), (5, 4), (0, 3), (1, 4), (2, 3), (0, 4), (1, 2)];
        let mut initial = BTreeMap::new();
        for (n, &c) in ONE_CLASS.iter().enumerate() {
            initial.insert(ClientId(n as u32), vec![(c, capacity)]);
        }
        for (j, &(a, b)) in TWO_CLASS.iter().enumerate() {
            let half = capacity / 2;
            initial.insert(ClientId((20 + j) as u32), vec![(a, half), (b, capacity - half)]);
        }
        let frame1 = Self::random_arrivals(seed_, 1, 30, &[6, 7, 8, 9], new_samples);
        Self {
            num_clients: 30,
            capacity,
            initial_assignment: initial,
            frames: vec![Vec::new(), frame1],
            generator,
            seed: seed_,
        }
    }

    /// Fifty-class layout: 10 one-class and 20 two-class (unequal split)
    /// clients over classes 0–29; classes 30–39 arrive at frame 1 and 40–49
    /// at frame 2, each at 12 randomly chosen clients.
    pub fn fifty_class_preset(capacity: usize, new_samples: usize, generator: GeneratorConfig, seed_: u64) -> Self {
        let mut initial = BTreeMap::new();
        for n in 0..10 {
            initial.insert(ClientId(n), vec![(n as usize, capacity)]);
        }
        for j in 0..20usize {
            let major = capacity * 2 / 3;
            initial.insert(
                ClientId((10 + j) as u32),
                vec![(10 + j, major), ((3 * j + 1) % 30, capacity - major)],
            );
        }
        let f1: Vec<usize> = (30..40).collect();
        let f2: Vec<usize> = (40..50).collect();
        Self {
            num_clients: 30,
            capacity,
            initial_assignment: initial,
            frames: vec![
                Vec::new(),
                Self::random_arrivals(seed_, 1, 30, &f1, new_samples),
                Self::random_arrivals(seed_, 2, 30, &f2, new_samples),
            ],
            generator,
            seed: seed_,
        }
    }

    /// 12 distinct random clients, classes assigned round-robin.
    fn random_arrivals(seed_: u64, frame: usize, num_clients: usize, classes: &[usize], count: usize) -> Vec<ArrivalEvent> {
        let mut rng = seed::stream_rng(seed_, Stream::Scenario, &[frame as u64]);
        let mut ids: Vec<u32> = (0..num_clients as u32).collect();
        ids.shuffle(&mut rng);
        let mut chosen: Vec<u32> = ids.into_iter().take(12.min(num_clients)).collect();
        chosen.sort_unstable();
        chosen
            .into_iter()
            .enumerate()
            .map(|(i, n)| ArrivalEvent {
                frame,
                client: ClientId(n),
                new_class: classes[i % classes.len()],
                new_sample_count: count,
            })
            .collect()
    }
}

/// Balanced held-out set: `per_class` fresh samples of each listed class.
pub fn evaluation_set(
    generator: &FeatureGenerator,
    classes: &BTreeSet<usize>,
    per_class: usize,
    rng_seed: u64,
) -> Result<Vec<LabeledSample>> {
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        let s = seed::derive(rng_seed, Stream::Evaluation, &[c as u64]);
        out.extend(generate_samples(c, per_class, generator, s)?);
    }
    Ok(out)
}
