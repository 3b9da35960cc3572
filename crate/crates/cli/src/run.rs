//! The `train` subcommand: fans (dataset, method, seed) runs out over a
//! worker pool and records a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dwrl::dataset::TransitionDataset;
use dwrl::mdp::{build_four_room, FourRoom};
use dwrl::offline_rl::train;
use dwrl::weighting::write_sa_csv;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EnvSpec, ExperimentConfig};

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub group: String,
    pub path: PathBuf,
    pub sha256: String,
    pub score_low: f64,
    pub score_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub dataset: String,
    pub method: String,
    pub weighting: String,
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub version: String,
    pub env: EnvSpec,
    pub datasets: Vec<DatasetEntry>,
    pub runs: Vec<RunEntry>,
}

impl Manifest {
    pub fn load(runs_dir: &Path) -> Result<Self> {
        let path = runs_dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("no run manifest at {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))
    }

    pub fn env(&self) -> Result<FourRoom> {
        Ok(build_four_room(self.env.size, self.env.size, self.env.slip)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn run_dir(out: &Path, dataset: &str, method: &str) -> PathBuf {
    out.join(dataset).join(method)
}

/// Runs every job of `cfg` and writes the manifest. Returns the manifest;
/// failed runs are listed there and leave a `.error` file behind.
pub fn train_all(cfg: &ExperimentConfig, config_bytes: &[u8]) -> Result<Manifest> {
    let env = build_four_room(cfg.env.size, cfg.env.size, cfg.env.slip)?;
    let mut datasets = BTreeMap::new();
    let mut entries = Vec::new();
    for d in &cfg.datasets {
        let bytes = fs::read(&d.path).with_context(|| format!("reading {}", d.path.display()))?;
        let ds = TransitionDataset::load(&d.path).with_context(|| format!("loading dataset {}", d.id))?;
        let meta = ds.meta();
        if meta.num_states != env.mdp.num_states() || meta.num_actions != env.mdp.num_actions() {
            bail!("dataset {} does not match the configured environment", d.id);
        }
        entries.push(DatasetEntry {
            id: d.id.clone(),
            group: d.group.clone().unwrap_or_else(|| d.id.clone()),
            path: fs::canonicalize(&d.path)?,
            sha256: sha256_hex(&bytes),
            score_low: meta.score_low,
            score_high: meta.score_high,
        });
        datasets.insert(d.id.clone(), ds);
    }

    let jobs: Vec<(&str, usize, u64)> = cfg
        .datasets
        .iter()
        .flat_map(|d| {
            (0..cfg.methods.len()).flat_map(move |m| cfg.seeds.iter().map(move |&s| (d.id.as_str(), m, s)))
        })
        .collect();
    for d in &cfg.datasets {
        for m in &cfg.methods {
            fs::create_dir_all(run_dir(&cfg.output, &d.id, &m.id))?;
        }
    }

    let runs: Vec<RunEntry> = jobs
        .par_iter()
        .map(|&(dataset, m, seed)| {
            let method = &cfg.methods[m];
            let dir = run_dir(&cfg.output, dataset, &method.id);
            let outcome = run_one(cfg, &env, &datasets[dataset], dataset, m, seed, &dir);
            let error_path = dir.join(format!("seed{seed}.error"));
            let error = match outcome {
                Ok(()) => {
                    let _ = fs::remove_file(&error_path);
                    None
                }
                Err(e) => {
                    let msg = format!("{e:#}");
                    let _ = fs::write(&error_path, format!("{msg}\n"));
                    Some(msg)
                }
            };
            RunEntry {
                dataset: dataset.to_string(),
                method: method.id.clone(),
                weighting: method.weighting.clone(),
                seed,
                ok: error.is_none(),
                error,
            }
        })
        .collect();

    let manifest = Manifest {
        config_sha256: sha256_hex(config_bytes),
        version: env!("CARGO_PKG_VERSION").to_string(),
        env: cfg.env.clone(),
        datasets: entries,
        runs,
    };
    fs::create_dir_all(&cfg.output)?;
    fs::write(cfg.output.join(MANIFEST), toml::to_string(&manifest)?)?;
    Ok(manifest)
}

fn run_one(
    cfg: &ExperimentConfig,
    env: &FourRoom,
    ds: &TransitionDataset,
    dataset_id: &str,
    method: usize,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    let spec = &cfg.methods[method];
    let mut settings = spec.resolve(cfg, seed)?;
    settings.algo.gamma = ds.meta().gamma;
    let mut outcome = train(&env.mdp, ds, &settings.algo, &settings.weighting, &settings.dw, &spec.id)?;
    outcome.result.dataset_id = dataset_id.to_string();
    let mut trace = Vec::new();
    outcome.result.write_csv(&mut trace)?;
    fs::write(dir.join(format!("seed{seed}.csv")), trace)?;
    let mut weights = Vec::new();
    write_sa_csv(&mut weights, &outcome.sa_multipliers, env.mdp.num_actions())?;
    fs::write(dir.join(format!("weights_seed{seed}.csv")), weights)?;
    Ok(())
}
