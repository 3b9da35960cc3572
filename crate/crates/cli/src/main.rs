mod config;
mod report;
mod run;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dwrl::dataset::{mix, return_histogram, rpsv_with, MixMode, ReturnKind, TransitionDataset};
use dwrl::experiment::{four_room, mixture_sources, suboptimal_dataset, FOUR_ROOM_TRAJECTORIES};

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dwrl", version, about = "Density-ratio weighted tabular offline RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    /// Uniform-random rollouts with optimal trajectories rejected.
    Suboptimal,
    /// Low-return mixture source.
    Low,
    /// High-return mixture source.
    High,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a four-room dataset.
    FourroomGen {
        #[arg(long, default_value_t = FOUR_ROOM_TRAJECTORIES)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = GenKind::Suboptimal)]
        kind: GenKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mix a low- and a high-return dataset.
    Mix {
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        high: PathBuf,
        /// Fraction of trajectories taken from the high-return dataset.
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value = "full")]
        mode: MixMode,
        /// Transition cap for `--mode small`.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print RPSV, mean return and a return histogram as CSV.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        /// Use undiscounted returns for RPSV and the mean.
        #[arg(long)]
        undiscounted: bool,
    },
    /// Run every (dataset, method, seed) combination of a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Aggregate a run directory into IQM reports.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the (s,a) distributions behind the stitching comparison.
    FourroomFigure {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn save(ds: &TransitionDataset, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ds.save(out).with_context(|| format!("writing {}", out.display()))
}

fn load(path: &Path) -> Result<TransitionDataset> {
    TransitionDataset::load(path).with_context(|| format!("loading {}", path.display()))
}

fn execute(command: Command) -> Result<bool> {
    match command {
        Command::FourroomGen { n, seed, kind, out } => {
            let env = four_room()?;
            let ds = match kind {
                GenKind::Suboptimal => suboptimal_dataset(&env, n, seed)?,
                GenKind::Low => mixture_sources(&env, n, seed)?.0,
                GenKind::High => mixture_sources(&env, n, seed)?.1,
            };
            save(&ds, &out)?;
        }
        Command::Mix {
            low,
            high,
            sigma,
            mode,
            budget,
            seed,
            out,
        } => {
            let ds = mix(&load(&low)?, &load(&high)?, sigma, mode, budget, seed)?;
            save(&ds, &out)?;
        }
        Command::Stats { data, bins, undiscounted } => {
            let ds = load(&data)?;
            let kind = if undiscounted { ReturnKind::Undiscounted } else { ReturnKind::Discounted };
            let returns = ds.returns(kind);
            let mean = returns.iter().sum::<f64>() / returns.len().max(1) as f64;
            let hist = return_histogram(&ds, bins)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "metric,lo,hi,value")?;
            writeln!(out, "trajectories,,,{}", ds.num_trajectories())?;
            writeln!(out, "transitions,,,{}", ds.len())?;
            writeln!(out, "rpsv,,,{}", rpsv_with(&ds, kind)?)?;
            writeln!(out, "mean_return,,,{mean}")?;
            for (i, count) in hist.counts.iter().enumerate() {
                writeln!(out, "histogram,{},{},{count}", hist.edges[i], hist.edges[i + 1])?;
            }
        }
        Command::Train { config } => {
            let bytes = fs::read(&config).with_context(|| format!("reading {}", config.display()))?;
            let text = String::from_utf8(bytes.clone()).context("config is not UTF-8")?;
            let base = config.parent().unwrap_or(Path::new("."));
            let cfg = ExperimentConfig::parse(&text, base)?;
            let manifest = run::train_all(&cfg, &bytes)?;
            let failed: Vec<_> = manifest.runs.iter().filter(|r| !r.ok).collect();
            for r in &failed {
                eprintln!(
                    "run {}/{}/seed{} failed: {}",
                    r.dataset,
                    r.method,
                    r.seed,
                    r.error.as_deref().unwrap_or("")
                );
            }
            eprintln!(
                "{} of {} runs succeeded; results in {}",
                manifest.runs.len() - failed.len(),
                manifest.runs.len(),
                cfg.output.display()
            );
            return Ok(failed.is_empty());
        }
        Command::Report { runs, out } => {
            let n = report::report(&runs, &out)?;
            eprintln!("aggregated {n} runs into {}", out.display());
        }
        Command::FourroomFigure {
            runs,
            out,
            dataset,
            seed,
        } => {
            let tv = report::figure(&runs, dataset.as_deref(), seed, &out)?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "column,tv_to_optimal")?;
            for (name, d) in tv {
                writeln!(stdout, "{name},{d}")?;
            }
        }
    }
    Ok(true)
}
