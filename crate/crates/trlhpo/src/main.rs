use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use trlhpo::eval::{generate_fixture, Evaluate};
use trlhpo::run::{
    build_evaluator, export_reports, random_policy_returns, read_log, run_search, EvalMode,
    RunConfig,
};
use trlhpo::space::ArchSpec;

#[derive(Parser)]
#[command(name = "trlhpo", about = "Layer-by-layer CNN search driven by a transformer actor-critic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write the log, checkpoint, and best-model summary.
    Run {
        /// JSON run configuration; missing fields take defaults.
        #[arg(long)]
        config: PathBuf,
        /// Force the analytic surrogate evaluator.
        #[arg(long)]
        surrogate: bool,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the wall-clock budget in seconds.
        #[arg(long = "budget-s")]
        budget_s: Option<f64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute reports from a run log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Budget for the accuracy-within-budget metric; defaults to the
        /// full run duration.
        #[arg(long = "budget-s")]
        budget_s: Option<f64>,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Evaluate a single architecture given as canonical JSON.
    EvalOne {
        /// Path to the architecture JSON file.
        #[arg(long)]
        arch: PathBuf,
        /// Use the analytic surrogate instead of real training.
        #[arg(long)]
        surrogate: bool,
        /// Run configuration for dataset paths and budgets.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean return of uniform-random episodes under a configuration.
    RandomBaseline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Write a synthetic IDX digit dataset for offline smoke testing.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Samples in the training pool file.
        #[arg(long, default_value_t = 4096)]
        train: usize,
        /// Samples in the test file.
        #[arg(long, default_value_t = 1024)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { config, surrogate, seed, budget_s, out } => {
            let mut cfg = RunConfig::load(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            if surrogate {
                cfg.mode = EvalMode::Surrogate;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(b) = budget_s {
                cfg.wallclock_budget_s = Some(b);
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let summary = run_search(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Report { log, out, budget_s, top_k } => {
            let records = read_log(&log)?;
            let budget = budget_s
                .unwrap_or_else(|| records.iter().map(|r| r.t_s()).fold(0.0, f64::max));
            let paths = export_reports(&records, &out, budget, top_k)?;
            println!("{}", serde_json::to_string_pretty(&paths)?);
        }
        Command::EvalOne { arch, surrogate, config, seed } => {
            let text = std::fs::read_to_string(&arch)
                .with_context(|| format!("reading {}", arch.display()))?;
            let arch = ArchSpec::from_canonical_json(&text)
                .map_err(|e| anyhow::anyhow!("parsing architecture: {e}"))?;
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None if surrogate => RunConfig::default(),
                None => bail!("eval-one needs --surrogate or --config with dataset paths"),
            };
            if surrogate {
                cfg.mode = EvalMode::Surrogate;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.cache = false;
            let evaluator = build_evaluator(&cfg)?;
            let outcome = evaluator.evaluate(&arch)?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
        }
        Command::RandomBaseline { config, episodes } => {
            let cfg = RunConfig::load(&config)?;
            let returns = random_policy_returns(&cfg, episodes)?;
            let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
            println!(
                "{}",
                serde_json::json!({ "episodes": episodes, "mean_return": mean })
            );
        }
        Command::GenData { out, train, test, seed } => {
            generate_fixture(&out, train, test, seed)?;
            println!(
                "{}",
                serde_json::json!({ "dir": out, "train_pool": train, "test": test, "seed": seed })
            );
        }
    }
    Ok(())
}
