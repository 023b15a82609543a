use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use fedteddi::config::ExperimentConfig;
use fedteddi::metrics::{metrics_file_name, summarize, MetricsWriter, Summary};
use fedteddi::orchestrator::{run_experiment_with, RoundRecord};
use fedteddi::scheduler::Policy;
use fedteddi::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const SUMMARY_FILE: &str = "summary.json";

#[derive(Parser)]
#[command(name = "fedteddi", about = "Federated edge learning scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (policy, seed) pair and write metrics plus a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated policy ids.
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<String>,
        /// Comma-separated integer seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Accuracy thresholds for the rounds-to-target summary.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.75])]
        targets: Vec<f64>,
    },
    /// Check a config and print it with all defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the version.
    Version,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, policies, seeds, out, targets } => cmd_run(&config, &policies, &seeds, &out, &targets),
        Command::Validate { config } => cmd_validate(&config),
        Command::Version => {
            println!("fedteddi {}", env!("CARGO_PKG_VERSION"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn cmd_validate(config: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)?;
    println!("# {} is valid; resolved configuration:", config.display());
    print!("{}", cfg.to_toml());
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("FEDTEDDI_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::Config(format!("FEDTEDDI_THREADS: expected a nonnegative integer, got `{raw}`")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn cmd_run(config: &Path, policies: &[String], seeds: &[u64], out: &Path, targets: &[f64]) -> Result<(), Failure> {
    let policies: Vec<Policy> = policies
        .iter()
        .map(|p| p.trim().parse::<Policy>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Config(e.to_string()))?;
    if seeds.is_empty() {
        return Err(Failure::Config("--seeds: at least one seed required".into()));
    }
    if let Some(t) = targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Failure::Config(format!("--targets: {t} is not an accuracy in [0, 1]")));
    }
    let cfg = ExperimentConfig::load(config)?;
    configure_threads()?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;

    let jobs: Vec<(Policy, u64)> = policies.iter().flat_map(|p| seeds.iter().map(move |s| (*p, *s))).collect();
    let written: Vec<PathBuf> = jobs.iter().map(|(p, s)| out.join(metrics_file_name(*p, *s))).collect();
    let results: Vec<Result<Vec<RoundRecord>, Failure>> = jobs
        .par_iter()
        .zip(&written)
        .map(|((policy, seed), path)| run_one(&cfg, *policy, *seed, path))
        .collect();

    let mut runs = BTreeMap::new();
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(records) => {
                runs.insert(*job, records);
            }
            Err(e) => {
                cleanup(&written, out);
                return Err(e);
            }
        }
    }
    let summary = summarize(&runs, targets);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Err(e) = std::fs::write(out.join(SUMMARY_FILE), text + "\n") {
        cleanup(&written, out);
        return Err(Failure::Runtime(format!("{SUMMARY_FILE}: {e}")));
    }
    print_summary(&summary);
    Ok(())
}

fn run_one(cfg: &ExperimentConfig, policy: Policy, seed: u64, path: &Path) -> Result<Vec<RoundRecord>, Failure> {
    let plan = cfg.plan(policy, seed)?;
    let mut writer = MetricsWriter::create(path)?;
    let records = run_experiment_with(&plan, &mut |r| writer.append(r))
        .map_err(|e| Failure::Runtime(format!("{policy} seed {seed}: {e}")))?;
    writer.finish()?;
    Ok(records)
}

fn cleanup(written: &[PathBuf], out: &Path) {
    for p in written.iter().chain(std::iter::once(&out.join(SUMMARY_FILE))) {
        let _ = std::fs::remove_file(p);
    }
}

fn print_summary(summary: &Summary) {
    println!("{:<16} {:>5} {:>7} {:>18} {:>8}", "policy", "frame", "target", "rounds (mean±std)", "reached");
    for t in &summary.rounds_to_target {
        let reached = t.per_seed.values().filter(|r| r.is_some()).count();
        let rounds = match (t.mean, t.std) {
            (Some(m), Some(s)) => format!("{m:.1}±{s:.1}"),
            _ => "not reached".to_string(),
        };
        println!(
            "{:<16} {:>5} {:>7.2} {:>18} {:>5}/{}",
            t.policy.id(),
            t.frame,
            t.target,
            rounds,
            reached,
            t.per_seed.len()
        );
    }
    println!();
    println!("{:<16} {:>5} {:>22}", "policy", "frame", "final accuracy");
    for f in &summary.final_accuracy {
        println!("{:<16} {:>5} {:>15.4}±{:.4}", f.policy.id(), f.frame, f.mean, f.std);
    }
}
