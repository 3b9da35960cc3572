//! Weighted tabular offline RL: conservative Q-learning, implicit
//! (expectile) Q-learning and behavior cloning, plus the training loop that
//! interleaves weight learning with learner updates.
//!
//! Every update takes per-sample multipliers. Unit multipliers reproduce
//! the unweighted learners in [`reference`] exactly.

use std::fmt;
use std::str::FromStr;

use crate::dataset::{TransitionDataset, TransitionRecord};
use crate::error::{Error, Result};
use crate::eval::RunResult;
use crate::mdp::{evaluate_policy, TabularMdp, TabularPolicy};
use crate::rng::{derive_seed, seeded_rng};
use crate::sampling::{aw_sampler, draw_minibatch, pf_sampler, uniform_sampler, SamplerWeights};
use crate::weighting::{optdice_weights, DwConfig, DwTrainer, OptDiceConfig, WeightModel};

/// `beta * (q - v)` is clipped here before exponentiation.
pub const ADVANTAGE_EXP_CLIP: f64 = 10.0;
pub const EVAL_EPISODES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Cql,
    Iql,
    Bc,
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cql" => Ok(Algo::Cql),
            "iql" => Ok(Algo::Iql),
            "bc" => Ok(Algo::Bc),
            other => Err(Error::config(format!("unknown algorithm {other:?} (expected cql, iql or bc)"))),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Cql => "cql",
            Algo::Iql => "iql",
            Algo::Bc => "bc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlgoConfig {
    pub algo: Algo,
    pub gamma: f64,
    pub alpha_cql: f64,
    pub tau_expectile: f64,
    pub beta_awr: f64,
    pub step_size: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    /// Weight only the regularizer (CQL penalty, IQL policy extraction).
    pub reg_only: bool,
}

impl AlgoConfig {
    pub fn new(algo: Algo, gamma: f64) -> Self {
        Self {
            algo,
            gamma,
            alpha_cql: 0.01,
            tau_expectile: 0.7,
            beta_awr: 3.0,
            step_size: 0.5,
            batch_size: 256,
            steps: 50_000,
            eval_every: 500,
            eval_episodes: EVAL_EPISODES,
            seed: 0,
            reg_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if !(self.tau_expectile > 0.5 && self.tau_expectile < 1.0) {
            return Err(Error::config(format!("expectile must lie in (0.5, 1), got {}", self.tau_expectile)));
        }
        if !(self.alpha_cql >= 0.0 && self.beta_awr >= 0.0 && self.step_size > 0.0) {
            return Err(Error::config("alpha and beta must be non-negative and the step size positive"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(Error::config("batch size, eval cadence and episode count must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    num_actions: usize,
    q: Vec<f64>,
}

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_actions,
            q: vec![0.0; num_states * num_actions],
        }
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.num_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.q[s * self.num_actions..(s + 1) * self.num_actions]
    }

    pub fn max(&self, s: usize) -> f64 {
        self.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy_policy(&self) -> TabularPolicy {
        TabularPolicy::greedy(&self.q, self.num_actions, 0.0)
    }

    fn check_finite(&self) -> Result<()> {
        match self.q.iter().find(|x| !x.is_finite()) {
            Some(&bad) => Err(Error::numerical("Q table became non-finite", bad)),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VTable {
    v: Vec<f64>,
}

impl VTable {
    pub fn zeros(num_states: usize) -> Self {
        Self {
            v: vec![0.0; num_states],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.v
    }

    #[inline]
    pub fn get(&self, s: usize) -> f64 {
        self.v[s]
    }
}

/// Per-(s,a) accumulated policy mass; `pi(a|s)` is proportional to it.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyScores {
    num_actions: usize,
    scores: Vec<f64>,
}

impl PolicyScores {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_actions,
            scores: vec![0.0; num_states * num_actions],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.scores
    }

    pub fn policy(&self) -> TabularPolicy {
        TabularPolicy::from_scores(&self.scores, self.num_actions)
    }
}

/// Per-sample loss multipliers for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWeights {
    /// `w(s_i, a_i)`: TD terms and behavior cloning.
    pub sa: Vec<f64>,
    /// `w_state(s_i)`: IQL's value regression.
    pub state: Vec<f64>,
    /// Multiplier of the regularizer (CQL penalty, IQL policy extraction).
    pub reg: Vec<f64>,
}

impl SampleWeights {
    pub fn unit(n: usize) -> Self {
        Self {
            sa: vec![1.0; n],
            state: vec![1.0; n],
            reg: vec![1.0; n],
        }
    }

    /// Looks up per-sample multipliers in `(s,a)` and state tables. With
    /// `reg_only`, only the regularizer is weighted.
    pub fn from_tables(batch: &[&TransitionRecord], sa: &[f64], state: &[f64], num_actions: usize, reg_only: bool) -> Self {
        let w: Vec<f64> = batch.iter().map(|r| sa[r.s * num_actions + r.a]).collect();
        if reg_only {
            let n = batch.len();
            return Self {
                sa: vec![1.0; n],
                state: vec![1.0; n],
                reg: w,
            };
        }
        Self {
            state: batch.iter().map(|r| state[r.s]).collect(),
            reg: w.clone(),
            sa: w,
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.sa.len() != n || self.state.len() != n || self.reg.len() != n {
            return Err(Error::config("sample weights do not match the batch size"));
        }
        let ok = |xs: &[f64]| xs.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !(ok(&self.sa) && ok(&self.state) && ok(&self.reg)) {
            return Err(Error::config("sample weights must be finite and non-negative"));
        }
        Ok(())
    }
}

fn td_target(rec: &TransitionRecord, gamma: f64, next_value: f64) -> f64 {
    if rec.terminal {
        rec.r
    } else {
        rec.r + gamma * next_value
    }
}

/// One semi-gradient step on
/// `mean_i w_i [alpha (lse_a q(s_i,.) - q(s_i,a_i)) + (y_i - q(s_i,a_i))^2]`.
pub fn cql_update(q: &mut QTable, batch: &[&TransitionRecord], w: &SampleWeights, cfg: &AlgoConfig) -> Result<()> {
    w.check(batch.len())?;
    let na = q.num_actions;
    let inv_b = 1.0 / batch.len() as f64;
    let targets: Vec<f64> = batch.iter().map(|r| td_target(r, cfg.gamma, q.max(r.s_next))).collect();
    let mut grad = vec![0.0; q.q.len()];
    let mut soft = vec![0.0; na];
    for (i, rec) in batch.iter().enumerate() {
        let base = rec.s * na;
        let row = &q.q[base..base + na];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &x) in soft.iter_mut().zip(row) {
            *p = (x - m).exp();
            z += *p;
        }
        let reg = w.reg[i] * cfg.alpha_cql * inv_b;
        for (b, p) in soft.iter().enumerate() {
            grad[base + b] += reg * p / z;
        }
        grad[base + rec.a] -= reg;
        grad[base + rec.a] += w.sa[i] * 2.0 * (row[rec.a] - targets[i]) * inv_b;
    }
    for (x, g) in q.q.iter_mut().zip(&grad) {
        *x -= cfg.step_size * g;
    }
    q.check_finite()
}

/// Expectile regression weight `|tau - 1[u < 0]|`.
#[inline]
pub fn expectile_weight(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        1.0 - tau
    } else {
        tau
    }
}

/// One IQL step: expectile regression of `v` toward `q`, then regression of
/// `q` toward `r + gamma v(s')` with the updated `v`, then accumulation of
/// `w exp(beta (q - v))` into the policy scores. Returns how many
/// exponents hit the clip.
pub fn iql_update(
    q: &mut QTable,
    v: &mut VTable,
    scores: &mut PolicyScores,
    batch: &[&TransitionRecord],
    w: &SampleWeights,
    cfg: &AlgoConfig,
) -> Result<usize> {
    w.check(batch.len())?;
    let na = q.num_actions;
    let inv_b = 1.0 / batch.len() as f64;
    let mut grad_v = vec![0.0; v.v.len()];
    for (i, rec) in batch.iter().enumerate() {
        let u = q.get(rec.s, rec.a) - v.v[rec.s];
        grad_v[rec.s] -= w.state[i] * 2.0 * expectile_weight(u, cfg.tau_expectile) * u * inv_b;
    }
    for (x, g) in v.v.iter_mut().zip(&grad_v) {
        *x -= cfg.step_size * g;
    }
    let mut grad_q = vec![0.0; q.q.len()];
    for (i, rec) in batch.iter().enumerate() {
        let y = td_target(rec, cfg.gamma, v.v[rec.s_next]);
        grad_q[rec.s * na + rec.a] += w.sa[i] * 2.0 * (q.get(rec.s, rec.a) - y) * inv_b;
    }
    for (x, g) in q.q.iter_mut().zip(&grad_q) {
        *x -= cfg.step_size * g;
    }
    q.check_finite()?;
    if let Some(&bad) = v.v.iter().find(|x| !x.is_finite()) {
        return Err(Error::numerical("V table became non-finite", bad));
    }
    let mut clipped = 0;
    for (i, rec) in batch.iter().enumerate() {
        let mut x = cfg.beta_awr * (q.get(rec.s, rec.a) - v.v[rec.s]);
        if x > ADVANTAGE_EXP_CLIP {
            x = ADVANTAGE_EXP_CLIP;
            clipped += 1;
        }
        scores.scores[rec.s * na + rec.a] += w.reg[i] * x.exp();
    }
    Ok(clipped)
}

/// Adds each sample's weight to its `(s,a)` score.
pub fn bc_update(scores: &mut PolicyScores, batch: &[&TransitionRecord], w: &SampleWeights) -> Result<()> {
    w.check(batch.len())?;
    let na = scores.num_actions;
    for (i, rec) in batch.iter().enumerate() {
        scores.scores[rec.s * na + rec.a] += w.sa[i];
    }
    Ok(())
}

/// Full-dataset weighted behavior cloning: `pi(a|s)` proportional to the
/// summed weight of the `(s,a)` occurrences, uniform at unseen states.
pub fn weighted_bc_policy(ds: &TransitionDataset, sa_weights: &[f64]) -> TabularPolicy {
    let scores: Vec<f64> = ds.sa_counts().iter().zip(sa_weights).map(|(c, w)| c * w).collect();
    TabularPolicy::from_scores(&scores, ds.meta().num_actions)
}

/// The tables of one learner, whichever algorithm drives them.
#[derive(Debug, Clone)]
pub struct Learner {
    cfg: AlgoConfig,
    q: QTable,
    v: VTable,
    scores: PolicyScores,
    clipped: usize,
}

impl Learner {
    pub fn new(num_states: usize, num_actions: usize, cfg: AlgoConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            q: QTable::zeros(num_states, num_actions),
            v: VTable::zeros(num_states),
            scores: PolicyScores::zeros(num_states, num_actions),
            clipped: 0,
        })
    }

    pub fn config(&self) -> &AlgoConfig {
        &self.cfg
    }

    pub fn q(&self) -> &QTable {
        &self.q
    }

    pub fn v(&self) -> &VTable {
        &self.v
    }

    pub fn scores(&self) -> &PolicyScores {
        &self.scores
    }

    /// Advantage exponents clipped so far (IQL).
    pub fn clipped(&self) -> usize {
        self.clipped
    }

    pub fn step(&mut self, batch: &[&TransitionRecord], w: &SampleWeights) -> Result<()> {
        match self.cfg.algo {
            Algo::Cql => cql_update(&mut self.q, batch, w, &self.cfg),
            Algo::Iql => {
                self.clipped += iql_update(&mut self.q, &mut self.v, &mut self.scores, batch, w, &self.cfg)?;
                Ok(())
            }
            Algo::Bc => bc_update(&mut self.scores, batch, w),
        }
    }

    /// Greedy policy: argmax of Q for CQL, of the accumulated scores otherwise.
    pub fn policy(&self) -> TabularPolicy {
        match self.cfg.algo {
            Algo::Cql => self.q.greedy_policy(),
            Algo::Iql | Algo::Bc => self.scores.policy().to_greedy(),
        }
    }
}

/// Unweighted learners, kept separate from the weighted code paths so the
/// two can be compared.
pub mod reference {
    use super::*;

    pub fn cql_update(q: &mut QTable, batch: &[&TransitionRecord], cfg: &AlgoConfig) {
        let na = q.num_actions;
        let inv_b = 1.0 / batch.len() as f64;
        let targets: Vec<f64> = batch.iter().map(|r| td_target(r, cfg.gamma, q.max(r.s_next))).collect();
        let mut grad = vec![0.0; q.q.len()];
        for (rec, y) in batch.iter().zip(targets) {
            let base = rec.s * na;
            let row = &q.q[base..base + na];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let reg = cfg.alpha_cql * inv_b;
            for (b, e) in exps.iter().enumerate() {
                grad[base + b] += reg * e / z;
            }
            grad[base + rec.a] -= reg;
            grad[base + rec.a] += 2.0 * (row[rec.a] - y) * inv_b;
        }
        for (x, g) in q.q.iter_mut().zip(&grad) {
            *x -= cfg.step_size * g;
        }
    }

    pub fn iql_update(q: &mut QTable, v: &mut VTable, scores: &mut PolicyScores, batch: &[&TransitionRecord], cfg: &AlgoConfig) {
        let na = q.num_actions;
        let inv_b = 1.0 / batch.len() as f64;
        let mut grad_v = vec![0.0; v.v.len()];
        for rec in batch {
            let u = q.get(rec.s, rec.a) - v.v[rec.s];
            grad_v[rec.s] -= 2.0 * expectile_weight(u, cfg.tau_expectile) * u * inv_b;
        }
        for (x, g) in v.v.iter_mut().zip(&grad_v) {
            *x -= cfg.step_size * g;
        }
        let mut grad_q = vec![0.0; q.q.len()];
        for rec in batch {
            let y = td_target(rec, cfg.gamma, v.v[rec.s_next]);
            grad_q[rec.s * na + rec.a] += 2.0 * (q.get(rec.s, rec.a) - y) * inv_b;
        }
        for (x, g) in q.q.iter_mut().zip(&grad_q) {
            *x -= cfg.step_size * g;
        }
        for rec in batch {
            let x = (cfg.beta_awr * (q.get(rec.s, rec.a) - v.v[rec.s])).min(ADVANTAGE_EXP_CLIP);
            scores.scores[rec.s * na + rec.a] += x.exp();
        }
    }

    pub fn bc_update(scores: &mut PolicyScores, batch: &[&TransitionRecord]) {
        for rec in batch {
            scores.scores[rec.s * scores.num_actions + rec.a] += 1.0;
        }
    }

    /// Unweighted counterpart of [`super::Learner`].
    #[derive(Debug, Clone)]
    pub struct Learner {
        cfg: AlgoConfig,
        pub q: QTable,
        pub v: VTable,
        pub scores: PolicyScores,
    }

    impl Learner {
        pub fn new(num_states: usize, num_actions: usize, cfg: AlgoConfig) -> Self {
            Self {
                cfg,
                q: QTable::zeros(num_states, num_actions),
                v: VTable::zeros(num_states),
                scores: PolicyScores::zeros(num_states, num_actions),
            }
        }

        pub fn step(&mut self, batch: &[&TransitionRecord]) {
            match self.cfg.algo {
                Algo::Cql => cql_update(&mut self.q, batch, &self.cfg),
                Algo::Iql => iql_update(&mut self.q, &mut self.v, &mut self.scores, batch, &self.cfg),
                Algo::Bc => bc_update(&mut self.scores, batch),
            }
        }
    }
}

/// Source of sampling probabilities and loss multipliers for training.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Uniform,
    Aw { eta: f64 },
    Pf { k: f64 },
    /// DW trained alongside the learner on uniform minibatches.
    Dw,
    /// DW trained on AW minibatches; the learner also samples from AW.
    DwAw { eta: f64 },
    OptDice(OptDiceConfig),
    /// Fixed per-(s,a) loss multipliers.
    Fixed(Vec<f64>),
}

impl Weighting {
    pub fn name(&self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::Aw { .. } => "aw",
            Weighting::Pf { .. } => "pf",
            Weighting::Dw => "dw",
            Weighting::DwAw { .. } => "dw-aw",
            Weighting::OptDice(_) => "optdice",
            Weighting::Fixed(_) => "fixed",
        }
    }

    pub fn learns_weights(&self) -> bool {
        matches!(self, Weighting::Dw | Weighting::DwAw { .. })
    }
}

/// Divides a table by its dataset-frequency-weighted mean so that the
/// multipliers average to one over the data.
fn normalize_by_data(table: &[f64], counts: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = counts.iter().sum();
    let mean = table.iter().zip(counts).map(|(w, c)| w * c).sum::<f64>() / total;
    if !(mean > 0.0 && mean.is_finite()) {
        return Err(Error::numerical("weights have no positive mass on the data", mean));
    }
    Ok(table.iter().map(|w| w / mean).collect())
}

fn state_counts(counts: &[f64], num_actions: usize) -> Vec<f64> {
    counts.chunks(num_actions).map(|row| row.iter().sum()).collect()
}

/// Everything a finished run leaves behind besides its trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: TabularPolicy,
    pub result: RunResult,
    pub learner: Learner,
    /// Final learned weights for `dw` and `dw-aw`.
    pub weights: Option<WeightModel>,
    /// Saturated weight exponentials during DW training.
    pub saturated: usize,
    /// Effective per-(s,a) multiplier of the data distribution at the end
    /// of training (sampling and loss weights combined), mean one over the
    /// data and zero where the data has no samples.
    pub sa_multipliers: Vec<f64>,
}

/// Per-(s,a) multiplier that a sampler applies relative to uniform draws.
pub fn sampler_multipliers(ds: &TransitionDataset, sampler: &SamplerWeights) -> Vec<f64> {
    let n = ds.len() as f64;
    sampler
        .sa_mass(ds)
        .iter()
        .zip(ds.sa_counts())
        .map(|(m, c)| if c > 0.0 { m * n / c } else { 0.0 })
        .collect()
}

/// Seed tags for the independent random streams of a run.
const RL_STREAM: u64 = 1;
const DW_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

/// Trains one learner on `ds`, evaluating the greedy policy on `mdp` every
/// `eval_every` steps. `hook` sees the learner after every step.
pub fn train_with<F>(
    mdp: &TabularMdp,
    ds: &TransitionDataset,
    cfg: &AlgoConfig,
    weighting: &Weighting,
    dw_cfg: &DwConfig,
    method_id: &str,
    mut hook: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &Learner),
{
    cfg.validate()?;
    let meta = ds.meta();
    if meta.num_states != mdp.num_states() || meta.num_actions != mdp.num_actions() {
        return Err(Error::config("dataset does not match the evaluation MDP"));
    }
    let (ns, na) = (meta.num_states, meta.num_actions);
    let counts = ds.sa_counts();
    let s_counts = state_counts(&counts, na);
    let uniform = uniform_sampler(ds)?;
    let rl_sampler: SamplerWeights = match weighting {
        Weighting::Aw { eta } | Weighting::DwAw { eta } => aw_sampler(ds, *eta)?,
        Weighting::Pf { k } => pf_sampler(ds, *k)?,
        _ => uniform.clone(),
    };
    let static_tables: Option<(Vec<f64>, Vec<f64>)> = match weighting {
        Weighting::OptDice(oc) => {
            let ow = optdice_weights(ds, oc)?;
            Some((normalize_by_data(&ow.sa_weights, &counts)?, vec![1.0; ns]))
        }
        Weighting::Fixed(table) => {
            if table.len() != ns * na {
                return Err(Error::config("fixed weight table has the wrong size"));
            }
            Some((normalize_by_data(table, &counts)?, vec![1.0; ns]))
        }
        _ => None,
    };
    let mut dw = if weighting.learns_weights() {
        dw_cfg.validate()?;
        let dw_sampler = match weighting {
            Weighting::DwAw { .. } => rl_sampler.clone(),
            _ => uniform.clone(),
        };
        Some((DwTrainer::new(WeightModel::for_dataset(ds)?, *dw_cfg)?, dw_sampler))
    } else {
        None
    };

    let mut learner = Learner::new(ns, na, *cfg)?;
    let mut rl_rng = seeded_rng(derive_seed(cfg.seed, RL_STREAM));
    let mut dw_rng = seeded_rng(derive_seed(cfg.seed, DW_STREAM));
    let mut eval_rng = seeded_rng(derive_seed(cfg.seed, EVAL_STREAM));
    let mut result = RunResult::new(meta.curation.clone(), method_id, cfg.seed);
    let records = ds.records();
    let mut batch: Vec<&TransitionRecord> = Vec::with_capacity(cfg.batch_size);
    let mut dw_batch: Vec<&TransitionRecord> = Vec::with_capacity(dw_cfg.batch_size);

    for step in 1..=cfg.steps {
        if let Some((trainer, sampler)) = dw.as_mut() {
            dw_batch.clear();
            dw_batch.extend(draw_minibatch(sampler, dw_cfg.batch_size, &mut dw_rng).into_iter().map(|i| &records[i]));
            trainer.step(&dw_batch)?;
        }
        batch.clear();
        batch.extend(draw_minibatch(&rl_sampler, cfg.batch_size, &mut rl_rng).into_iter().map(|i| &records[i]));
        let w = if let Some((trainer, _)) = dw.as_ref() {
            let sa = normalize_by_data(&trainer.model().sa_table(), &counts)?;
            let st = normalize_by_data(&trainer.model().state_table(), &s_counts)?;
            SampleWeights::from_tables(&batch, &sa, &st, na, cfg.reg_only)
        } else if let Some((sa, st)) = static_tables.as_ref() {
            SampleWeights::from_tables(&batch, sa, st, na, cfg.reg_only)
        } else {
            SampleWeights::unit(batch.len())
        };
        learner.step(&batch, &w)?;
        hook(step, &learner);
        if step % cfg.eval_every == 0 {
            let score = evaluate_policy(mdp, &learner.policy(), cfg.eval_episodes, &mut eval_rng);
            result.push(step, score)?;
        }
    }

    let sampling = sampler_multipliers(ds, &rl_sampler);
    let (weights, saturated, loss) = match dw {
        Some((trainer, _)) => {
            let out = trainer.into_outcome();
            let table = normalize_by_data(&out.model.sa_table(), &counts)?;
            (Some(out.model), out.saturated, Some(table))
        }
        None => (None, 0, static_tables.map(|(sa, _)| sa)),
    };
    let combined: Vec<f64> = match loss {
        Some(loss) => sampling.iter().zip(&loss).map(|(a, b)| a * b).collect(),
        None => sampling,
    };
    let sa_multipliers = normalize_by_data(&combined, &counts)?
        .into_iter()
        .zip(&counts)
        .map(|(m, &c)| if c > 0.0 { m } else { 0.0 })
        .collect();
    Ok(TrainOutcome {
        policy: learner.policy(),
        result,
        learner,
        weights,
        saturated,
        sa_multipliers,
    })
}

pub fn train(
    mdp: &TabularMdp,
    ds: &TransitionDataset,
    cfg: &AlgoConfig,
    weighting: &Weighting,
    dw_cfg: &DwConfig,
    method_id: &str,
) -> Result<TrainOutcome> {
    train_with(mdp, ds, cfg, weighting, dw_cfg, method_id, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: usize, a: usize, r: f64, s_next: usize, terminal: bool) -> TransitionRecord {
        TransitionRecord {
            traj_id: 0,
            t: 0,
            s,
            a,
            r,
            s_next,
            terminal,
            timeout: false,
        }
    }

    #[test]
    fn expectile_at_half_is_least_squares() {
        assert_eq!(expectile_weight(1.0, 0.5), expectile_weight(-1.0, 0.5));
        assert_eq!(expectile_weight(1.0, 0.7), 0.7);
        assert!((expectile_weight(-1.0, 0.7) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cql_single_step_by_hand() {
        let mut cfg = AlgoConfig::new(Algo::Cql, 0.9);
        cfg.alpha_cql = 1.0;
        cfg.step_size = 0.1;
        let mut q = QTable::zeros(2, 2);
        let r = rec(0, 1, 1.0, 1, true);
        cql_update(&mut q, &[&r], &SampleWeights::unit(1), &cfg).unwrap();
        // grad q(0,0) = 0.5, grad q(0,1) = 0.5 - 1 + 2 (0 - 1) = -2.5
        assert!((q.get(0, 0) + 0.05).abs() < 1e-15);
        assert!((q.get(0, 1) - 0.25).abs() < 1e-15);
        assert_eq!(q.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn zero_weight_is_a_no_op() {
        let cfg = AlgoConfig::new(Algo::Cql, 0.9);
        let mut q = QTable::zeros(2, 2);
        let r = rec(0, 1, 1.0, 1, false);
        let w = SampleWeights {
            sa: vec![0.0],
            state: vec![0.0],
            reg: vec![0.0],
        };
        cql_update(&mut q, &[&r], &w, &cfg).unwrap();
        assert!(q.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bc_point_mass_is_deterministic() {
        let mut scores = PolicyScores::zeros(2, 3);
        let r = rec(1, 2, 0.0, 0, false);
        let w = SampleWeights {
            sa: vec![5.0],
            state: vec![1.0],
            reg: vec![1.0],
        };
        bc_update(&mut scores, &[&r], &w).unwrap();
        let pi = scores.policy();
        assert_eq!(pi.row(1), &[0.0, 0.0, 1.0]);
        assert_eq!(pi.row(0), &[1.0 / 3.0; 3]);
    }

    #[test]
    fn negative_weights_rejected() {
        let mut scores = PolicyScores::zeros(1, 1);
        let r = rec(0, 0, 0.0, 0, false);
        let w = SampleWeights {
            sa: vec![-1.0],
            state: vec![1.0],
            reg: vec![1.0],
        };
        assert!(bc_update(&mut scores, &[&r], &w).is_err());
    }

    #[test]
    fn reg_only_weights_only_the_regularizer() {
        let r = rec(0, 1, 0.0, 0, false);
        let w = SampleWeights::from_tables(&[&r], &[1.0, 4.0], &[2.0], 2, true);
        assert_eq!((w.sa[0], w.state[0], w.reg[0]), (1.0, 1.0, 4.0));
        let w = SampleWeights::from_tables(&[&r], &[1.0, 4.0], &[2.0], 2, false);
        assert_eq!((w.sa[0], w.state[0], w.reg[0]), (4.0, 2.0, 4.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = AlgoConfig::new(Algo::Iql, 0.99);
        assert!(cfg.validate().is_ok());
        cfg.tau_expectile = 0.5;
        assert!(cfg.validate().is_err());
        assert!(AlgoConfig::new(Algo::Bc, 0.0).validate().is_err());
        assert_eq!("IQL".parse::<Algo>().unwrap(), Algo::Iql);
        assert!("sac".parse::<Algo>().is_err());
    }
}
