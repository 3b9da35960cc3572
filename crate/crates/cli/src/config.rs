//! Experiment configuration files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dwrl::offline_rl::{Algo, AlgoConfig, Weighting};
use dwrl::sampling::AwPreset;
use dwrl::weighting::{DwConfig, OptDiceConfig};
use serde::{Deserialize, Serialize};

fn default_steps() -> usize {
    50_000
}

fn default_eval_every() -> usize {
    500
}

fn default_size() -> usize {
    dwrl::experiment::FOUR_ROOM_SIZE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub slip: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            size: default_size(),
            slip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: String,
    pub path: PathBuf,
    /// Report group, e.g. the mixture ratio of a sweep. Defaults to the id.
    pub group: Option<String>,
}

/// One algorithm and weighting scheme. Unset hyperparameters fall back to
/// the per-algorithm defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub id: String,
    pub algo: String,
    #[serde(default = "default_weighting")]
    pub weighting: String,
    pub eta: Option<f64>,
    pub aw_preset: Option<String>,
    pub k: Option<f64>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub beta: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda_f: Option<f64>,
    pub lambda_k: Option<f64>,
    pub dw_lr: Option<f64>,
    pub dw_batch_size: Option<usize>,
    pub optdice_alpha: Option<f64>,
    #[serde(default)]
    pub reg_only: bool,
}

fn default_weighting() -> String {
    "uniform".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub env: EnvSpec,
    pub datasets: Vec<DatasetSpec>,
    pub methods: Vec<MethodSpec>,
}

impl ExperimentConfig {
    /// Parses a config; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).context("invalid config file")?;
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        for d in &mut cfg.datasets {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("config lists no seeds");
        }
        if self.datasets.is_empty() || self.methods.is_empty() {
            bail!("config needs at least one dataset and one method");
        }
        if self.steps == 0 || self.eval_every == 0 {
            bail!("steps and eval_every must be positive");
        }
        let mut ids = BTreeSet::new();
        for m in &self.methods {
            if !ids.insert(m.id.as_str()) {
                bail!("duplicate method id {:?}", m.id);
            }
            m.resolve(self, 0)?;
        }
        let mut ids = BTreeSet::new();
        for d in &self.datasets {
            if !ids.insert(d.id.as_str()) {
                bail!("duplicate dataset id {:?}", d.id);
            }
            if !d.path.is_file() {
                bail!("dataset {} not found at {}", d.id, d.path.display());
            }
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        Ok(())
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone)]
pub struct RunSettings {
    pub algo: AlgoConfig,
    pub weighting: Weighting,
    pub dw: DwConfig,
}

impl MethodSpec {
    pub fn resolve(&self, cfg: &ExperimentConfig, seed: u64) -> Result<RunSettings> {
        let algo: Algo = self.algo.parse()?;
        let mut ac = AlgoConfig::new(algo, dwrl::mdp::FOUR_ROOM_GAMMA);
        ac.steps = cfg.steps;
        ac.eval_every = cfg.eval_every;
        ac.seed = seed;
        ac.reg_only = self.reg_only;
        if let Some(x) = self.alpha {
            ac.alpha_cql = x;
        }
        if let Some(x) = self.tau {
            ac.tau_expectile = x;
        }
        if let Some(x) = self.beta {
            ac.beta_awr = x;
        }
        if let Some(x) = self.lr {
            ac.step_size = x;
        }
        if let Some(x) = self.batch_size {
            ac.batch_size = x;
        }
        ac.validate()?;

        let mut dw = match algo {
            Algo::Iql => DwConfig::iql_defaults(),
            _ => DwConfig::cql_defaults(),
        };
        dw.steps = cfg.steps;
        dw.seed = seed;
        if let Some(x) = self.lambda_f {
            dw.lambda_f = x;
        }
        if let Some(x) = self.lambda_k {
            dw.lambda_k = x;
        }
        if let Some(x) = self.dw_lr {
            dw.step_size = x;
        }
        if let Some(x) = self.dw_batch_size {
            dw.batch_size = x;
        }
        dw.validate()?;

        let eta = || -> Result<f64> {
            if let Some(eta) = self.eta {
                return Ok(eta);
            }
            let preset: AwPreset = self.aw_preset.as_deref().unwrap_or("M").parse()?;
            Ok(match algo {
                Algo::Iql => preset.iql_eta(),
                _ => preset.cql_eta(),
            })
        };
        let weighting = match self.weighting.as_str() {
            "uniform" => Weighting::Uniform,
            "aw" => Weighting::Aw { eta: eta()? },
            "pf" => Weighting::Pf { k: self.k.unwrap_or(10.0) },
            "dw" => Weighting::Dw,
            "dw-aw" => Weighting::DwAw { eta: eta()? },
            "optdice" => {
                let mut oc = OptDiceConfig::default();
                if let Some(a) = self.optdice_alpha {
                    oc.alpha = a;
                }
                Weighting::OptDice(oc)
            }
            other => bail!("method {}: unknown weighting {other:?} (expected uniform, aw, pf, dw, dw-aw or optdice)", self.id),
        };
        Ok(RunSettings { algo: ac, weighting, dw })
    }
}
