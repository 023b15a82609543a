//! Metrics files: a `schema=1` header line followed by one JSON object per round.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::orchestrator::RoundRecord;
use crate::scheduler::Policy;

pub const SCHEMA_HEADER: &str = "schema=1";

pub fn metrics_file_name(policy: Policy, seed: u64) -> String {
    format!("{policy}_seed{seed}.jsonl")
}

/// Appends records to a metrics file as they are produced.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{SCHEMA_HEADER}")?;
        Ok(Self { out })
    }

    pub fn append(&mut self, record: &RoundRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| invalid(format!("cannot encode record: {e}")))?;
        writeln!(self.out, "{line}")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_metrics(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = MetricsWriter::create(path)?;
    for r in records {
        w.append(r)?;
    }
    w.finish()
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    match lines.next().transpose()? {
        Some(h) if h == SCHEMA_HEADER => {}
        other => {
            return Err(invalid(format!(
                "{}: expected header `{SCHEMA_HEADER}`, found {:?}",
                path.display(),
                other.unwrap_or_default()
            )))
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| invalid(format!("{}: line {}: {e}", path.display(), i + 2)))?,
        );
    }
    Ok(out)
}

/// First round `k` of `frame` whose test accuracy reaches `target`.
pub fn rounds_to_target(records: &[RoundRecord], frame: usize, target: f64) -> Option<usize> {
    records
        .iter()
        .find(|r| r.frame == frame && r.test_accuracy >= target)
        .map(|r| r.round)
}

/// Highest test accuracy reached in `frame`.
pub fn best_accuracy(records: &[RoundRecord], frame: usize) -> Option<f64> {
    records
        .iter()
        .filter(|r| r.frame == frame)
        .map(|r| r.test_accuracy)
        .max_by(f64::total_cmp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub policy: Policy,
    pub frame: usize,
    pub target: f64,
    /// Rounds to target for each seed, `None` where it was never reached.
    pub per_seed: BTreeMap<u64, Option<usize>>,
    /// Mean and sample standard deviation over the seeds that reached the target.
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAccuracy {
    pub policy: Policy,
    pub frame: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds_to_target: Vec<TargetSummary>,
    pub final_accuracy: Vec<FinalAccuracy>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Rounds-to-target per (policy, frame, target) and final accuracy per
/// (policy, frame), aggregated over seeds.
pub fn summarize(runs: &BTreeMap<(Policy, u64), Vec<RoundRecord>>, targets: &[f64]) -> Summary {
    let mut by_policy: BTreeMap<Policy, BTreeMap<u64, &[RoundRecord]>> = BTreeMap::new();
    for ((p, s), recs) in runs {
        by_policy.entry(*p).or_default().insert(*s, recs);
    }
    let mut summary = Summary { rounds_to_target: Vec::new(), final_accuracy: Vec::new() };
    for (policy, seeds) in &by_policy {
        let frames = seeds.values().flat_map(|r| r.iter().map(|x| x.frame)).max().map_or(0, |f| f + 1);
        for frame in 0..frames {
            for &target in targets {
                let per_seed: BTreeMap<u64, Option<usize>> =
                    seeds.iter().map(|(s, r)| (*s, rounds_to_target(r, frame, target))).collect();
                let reached: Vec<f64> = per_seed.values().flatten().map(|&k| k as f64).collect();
                let (mean, std) = if reached.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_std(&reached);
                    (Some(m), Some(s))
                };
                summary.rounds_to_target.push(TargetSummary { policy: *policy, frame, target, per_seed, mean, std });
            }
            let finals: Vec<f64> = seeds
                .values()
                .filter_map(|r| r.iter().rev().find(|x| x.frame == frame).map(|x| x.test_accuracy))
                .collect();
            if !finals.is_empty() {
                let (mean, std) = mean_std(&finals);
                summary.final_accuracy.push(FinalAccuracy { policy: *policy, frame, mean, std });
            }
        }
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(frame: usize, round: usize, acc: f64) -> RoundRecord {
        RoundRecord {
            frame,
            round,
            global_round: round as u32,
            selected: vec![],
            bandwidths: BTreeMap::new(),
            round_delay: 0.0,
            global_loss: 1.0,
            test_accuracy: acc,
            objective_terms: None,
            lambda: 0.0,
            sigma_hat: 0.0,
            v_bound_terms: None,
        }
    }

    #[test]
    fn crossing_round_and_not_reached() {
        let recs: Vec<RoundRecord> = (1..=50).map(|k| rec(0, k, if k >= 37 { 0.6 } else { 0.3 })).collect();
        assert_eq!(rounds_to_target(&recs, 0, 0.5), Some(37));
        assert_eq!(rounds_to_target(&recs, 0, 0.9), None);
        assert_eq!(rounds_to_target(&recs, 1, 0.1), None);
        assert_eq!(best_accuracy(&recs, 0), Some(0.6));
    }

    #[test]
    fn summary_statistics() {
        let mut runs = BTreeMap::new();
        for (seed, cross) in [(1u64, 10usize), (2, 20), (3, 0)] {
            let recs = (1..=30).map(|k| rec(0, k, if cross > 0 && k >= cross { 0.8 } else { 0.1 })).collect();
            runs.insert((Policy::Random, seed), recs);
        }
        let s = summarize(&runs, &[0.5]);
        let t = &s.rounds_to_target[0];
        assert_eq!(t.per_seed[&3], None);
        assert_eq!(t.mean, Some(15.0));
        assert!((t.std.unwrap() - 50f64.sqrt()).abs() < 1e-12);
        assert!((s.final_accuracy[0].mean - 1.7 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(metrics_file_name(Policy::FedTeddi, 4));
        assert!(path.ends_with("fedteddi_seed4.jsonl"));
        let recs = vec![rec(0, 1, 0.25), rec(0, 2, 0.5)];
        write_metrics(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("schema=1\n"));
        assert_eq!(read_metrics(&path).unwrap(), recs);
        std::fs::write(&path, "schema=2\n").unwrap();
        assert!(read_metrics(&path).unwrap_err().to_string().contains("schema=1"));
    }
}
