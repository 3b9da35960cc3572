//! Learned density-ratio weights `w(s,a) = exp(phi(s) + psi(s,a))`.
//!
//! The weights are trained to maximize the reweighted reward of the dataset
//! while penalizing violations of undiscounted flow conservation,
//! `(w_state(s') - w(s,a))^2` with `w_state(s) = exp(phi(s))`, and the
//! divergence of the reweighted data from the original data. Per minibatch
//! of size `B`:
//!
//! ```text
//! w_bar_i = w_i / sum_j w_j
//! L_R     = -sum_i w_bar_i r_i
//! L_F     = 1/B sum_i (w_state(s'_i) - w_i)^2      (raw weights, timeouts skipped)
//! L_K     = sum_i w_bar_i ln w_bar_i
//! L       = L_R + lambda_F L_F + lambda_K L_K
//! ```
//!
//! A transition into a terminal state has no successor of its own; its
//! target is a restart marker whose `phi` is the initial-distribution
//! average of `phi` over the dataset's start states.
//!
//! The module also provides the OptDiCE weights used as a baseline.

use std::io::Write;

use rand::Rng;

use crate::dataset::{TransitionDataset, TransitionRecord};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng::seeded_rng;
use crate::sampling::{draw_minibatch, uniform_sampler, SamplerWeights};

/// Log-weights are clamped to this range before exponentiation.
pub const LOG_WEIGHT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightModel {
    num_states: usize,
    num_actions: usize,
    phi: Vec<f64>,
    psi: Vec<f64>,
    restart: Vec<(usize, f64)>,
}

#[inline]
fn clamped_exp(x: f64) -> (f64, bool) {
    if x > LOG_WEIGHT_CLAMP {
        (LOG_WEIGHT_CLAMP.exp(), true)
    } else if x < -LOG_WEIGHT_CLAMP {
        ((-LOG_WEIGHT_CLAMP).exp(), true)
    } else {
        (x.exp(), false)
    }
}

impl WeightModel {
    /// Zero-initialized model (all weights 1). `restart` is the
    /// distribution terminal transitions are rewired to.
    pub fn new(num_states: usize, num_actions: usize, restart: Vec<(usize, f64)>) -> Result<Self> {
        let total: f64 = restart.iter().map(|&(_, p)| p).sum();
        if restart.iter().any(|&(s, p)| s >= num_states || !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("restart distribution must be a probability vector over states"));
        }
        Ok(Self {
            num_states,
            num_actions,
            phi: vec![0.0; num_states],
            psi: vec![0.0; num_states * num_actions],
            restart,
        })
    }

    /// Zero model whose restart marker follows the dataset's trajectory heads.
    pub fn for_dataset(ds: &TransitionDataset) -> Result<Self> {
        let restart = ds
            .initial_state_dist()
            .into_iter()
            .enumerate()
            .filter(|&(_, p)| p > 0.0)
            .collect();
        Self::new(ds.meta().num_states, ds.meta().num_actions, restart)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.phi
    }

    pub fn psi_mut(&mut self) -> &mut [f64] {
        &mut self.psi
    }

    pub fn restart(&self) -> &[(usize, f64)] {
        &self.restart
    }

    #[inline]
    pub fn log_w(&self, s: usize, a: usize) -> f64 {
        self.phi[s] + self.psi[s * self.num_actions + a]
    }

    #[inline]
    pub fn w(&self, s: usize, a: usize) -> f64 {
        clamped_exp(self.log_w(s, a)).0
    }

    #[inline]
    pub fn w_state(&self, s: usize) -> f64 {
        clamped_exp(self.phi[s]).0
    }

    pub fn restart_phi(&self) -> f64 {
        self.restart.iter().map(|&(s, p)| p * self.phi[s]).sum()
    }

    /// Log of the flow target of a transition.
    #[inline]
    fn log_target(&self, rec: &TransitionRecord) -> f64 {
        if rec.terminal {
            self.restart_phi()
        } else {
            self.phi[rec.s_next]
        }
    }

    /// `w(s,a)` for every pair, row-major.
    pub fn sa_table(&self) -> Vec<f64> {
        (0..self.num_states)
            .flat_map(|s| (0..self.num_actions).map(move |a| (s, a)))
            .map(|(s, a)| self.w(s, a))
            .collect()
    }

    pub fn state_table(&self) -> Vec<f64> {
        (0..self.num_states).map(|s| self.w_state(s)).collect()
    }

    /// Raw `w(s_i, a_i)` for every record.
    pub fn record_weights(&self, ds: &TransitionDataset) -> Vec<f64> {
        ds.records().iter().map(|r| self.w(r.s, r.a)).collect()
    }

    /// Writes the `s,a,w` table.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_sa_csv(out, &self.sa_table(), self.num_actions)
    }
}

/// Writes a row-major (s,a) table as `s,a,w` CSV.
pub fn write_sa_csv<W: Write>(mut out: W, table: &[f64], num_actions: usize) -> Result<()> {
    writeln!(out, "s,a,w")?;
    for (idx, w) in table.iter().enumerate() {
        writeln!(out, "{},{},{}", idx / num_actions, idx % num_actions, w)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DwConfig {
    pub lambda_f: f64,
    pub lambda_k: f64,
    pub step_size: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for DwConfig {
    fn default() -> Self {
        Self::cql_defaults()
    }
}

impl DwConfig {
    /// Penalty strengths tuned for conservative Q-learning.
    pub fn cql_defaults() -> Self {
        Self {
            lambda_f: 0.1,
            lambda_k: 0.2,
            step_size: 1e-4,
            batch_size: 256,
            steps: 50_000,
            seed: 0,
        }
    }

    /// Penalty strengths tuned for implicit Q-learning.
    pub fn iql_defaults() -> Self {
        Self {
            lambda_f: 1.0,
            lambda_k: 1.0,
            ..Self::cql_defaults()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f >= 0.0 && self.lambda_k >= 0.0) {
            return Err(Error::config("lambda_F and lambda_K must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::config("step size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights {
    pub w: Vec<f64>,
    pub w_state_next: Vec<f64>,
    pub w_bar: Vec<f64>,
    /// Exponentials that hit the clamp.
    pub saturated: usize,
}

/// Raw, successor-state and batch-normalized weights for a minibatch.
pub fn weights(model: &WeightModel, batch: &[&TransitionRecord]) -> Result<BatchWeights> {
    if batch.is_empty() {
        return Err(Error::config("empty weight batch"));
    }
    let mut saturated = 0;
    let mut w = Vec::with_capacity(batch.len());
    let mut w_state_next = Vec::with_capacity(batch.len());
    for rec in batch {
        let (wi, si) = clamped_exp(model.log_w(rec.s, rec.a));
        let (zi, sz) = clamped_exp(model.log_target(rec));
        saturated += si as usize + sz as usize;
        w.push(wi);
        w_state_next.push(zi);
    }
    let total: f64 = w.iter().sum();
    let w_bar = w.iter().map(|x| x / total).collect();
    Ok(BatchWeights {
        w,
        w_state_next,
        w_bar,
        saturated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLosses {
    pub l_r: f64,
    pub l_f: f64,
    pub l_k: f64,
    pub total: f64,
}

impl BatchLosses {
    pub fn is_finite(&self) -> bool {
        self.l_r.is_finite() && self.l_f.is_finite() && self.l_k.is_finite() && self.total.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwGradients {
    pub dphi: Vec<f64>,
    pub dpsi: Vec<f64>,
}

fn check_batch(batch: &[&TransitionRecord]) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::config("weight losses need a batch of at least 2"));
    }
    Ok(())
}

fn losses_from(bw: &BatchWeights, batch: &[&TransitionRecord], cfg: &DwConfig) -> BatchLosses {
    let b = batch.len() as f64;
    let l_r = -bw.w_bar.iter().zip(batch).map(|(wb, rec)| wb * rec.r).sum::<f64>();
    let l_f = batch
        .iter()
        .enumerate()
        .filter(|(_, rec)| !rec.timeout)
        .map(|(i, _)| (bw.w_state_next[i] - bw.w[i]).powi(2))
        .sum::<f64>()
        / b;
    let l_k = bw.w_bar.iter().map(|&wb| wb * wb.ln()).sum::<f64>();
    BatchLosses {
        l_r,
        l_f,
        l_k,
        total: l_r + cfg.lambda_f * l_f + cfg.lambda_k * l_k,
    }
}

pub fn dw_losses(model: &WeightModel, batch: &[&TransitionRecord], cfg: &DwConfig) -> Result<BatchLosses> {
    check_batch(batch)?;
    let bw = weights(model, batch)?;
    Ok(losses_from(&bw, batch, cfg))
}

/// Losses and the exact gradient of `L` with respect to every `phi` and
/// `psi` entry, including the coupling through batch normalization.
pub fn dw_loss_and_gradients(
    model: &WeightModel,
    batch: &[&TransitionRecord],
    cfg: &DwConfig,
) -> Result<(BatchLosses, DwGradients, usize)> {
    check_batch(batch)?;
    let bw = weights(model, batch)?;
    let losses = losses_from(&bw, batch, cfg);
    let b = batch.len() as f64;
    let mean_r = -losses.l_r;
    let mut dphi = vec![0.0; model.num_states];
    let mut dpsi = vec![0.0; model.num_states * model.num_actions];
    let restart_phi = model.restart_phi();
    for (i, rec) in batch.iter().enumerate() {
        let wb = bw.w_bar[i];
        let (w, z) = (bw.w[i], bw.w_state_next[i]);
        let flow = if rec.timeout { 0.0 } else { 2.0 / b * (z - w) };
        // d L / d log w_i
        let g_u = -wb * (rec.r - mean_r) + cfg.lambda_k * wb * (wb.ln() - losses.l_k) - cfg.lambda_f * flow * w;
        let log_w = model.log_w(rec.s, rec.a);
        if log_w.abs() <= LOG_WEIGHT_CLAMP {
            dphi[rec.s] += g_u;
            dpsi[rec.s * model.num_actions + rec.a] += g_u;
        }
        // d L / d log w_state(s'_i)
        let g_v = cfg.lambda_f * flow * z;
        if g_v == 0.0 {
            continue;
        }
        if rec.terminal {
            if restart_phi.abs() <= LOG_WEIGHT_CLAMP {
                for &(s0, p) in &model.restart {
                    dphi[s0] += p * g_v;
                }
            }
        } else if model.phi[rec.s_next].abs() <= LOG_WEIGHT_CLAMP {
            dphi[rec.s_next] += g_v;
        }
    }
    Ok((losses, DwGradients { dphi, dpsi }, bw.saturated))
}

pub fn dw_gradients(model: &WeightModel, batch: &[&TransitionRecord], cfg: &DwConfig) -> Result<DwGradients> {
    dw_loss_and_gradients(model, batch, cfg).map(|(_, g, _)| g)
}

/// Owns a model and its optimizer state; one call to [`DwTrainer::step`]
/// is one minibatch update.
#[derive(Debug, Clone)]
pub struct DwTrainer {
    model: WeightModel,
    cfg: DwConfig,
    phi_opt: Adam,
    psi_opt: Adam,
    saturated: usize,
    trace: Vec<BatchLosses>,
}

impl DwTrainer {
    pub fn new(model: WeightModel, cfg: DwConfig) -> Result<Self> {
        cfg.validate()?;
        let phi_opt = Adam::new(model.phi.len(), cfg.step_size);
        let psi_opt = Adam::new(model.psi.len(), cfg.step_size);
        Ok(Self {
            model,
            cfg,
            phi_opt,
            psi_opt,
            saturated: 0,
            trace: Vec::new(),
        })
    }

    pub fn model(&self) -> &WeightModel {
        &self.model
    }

    pub fn config(&self) -> &DwConfig {
        &self.cfg
    }

    pub fn saturated(&self) -> usize {
        self.saturated
    }

    pub fn trace(&self) -> &[BatchLosses] {
        &self.trace
    }

    pub fn step(&mut self, batch: &[&TransitionRecord]) -> Result<BatchLosses> {
        let (losses, grads, saturated) = dw_loss_and_gradients(&self.model, batch, &self.cfg)?;
        debug_assert!(losses.l_f >= 0.0);
        debug_assert!(losses.l_k <= 1e-12 && losses.l_k >= -(batch.len() as f64).ln() - 1e-9);
        self.trace.push(losses);
        if !losses.is_finite() {
            let tail: Vec<String> = self
                .trace
                .iter()
                .rev()
                .take(5)
                .map(|l| format!("(R={:.4e}, F={:.4e}, K={:.4e})", l.l_r, l.l_f, l.l_k))
                .collect();
            return Err(Error::numerical(
                format!(
                    "non-finite weight loss at step {}; latest losses {}",
                    self.trace.len(),
                    tail.join(" ")
                ),
                losses.total,
            ));
        }
        self.saturated += saturated;
        self.phi_opt.step(&mut self.model.phi, &grads.dphi);
        self.psi_opt.step(&mut self.model.psi, &grads.dpsi);
        Ok(losses)
    }

    pub fn into_outcome(self) -> DwOutcome {
        DwOutcome {
            model: self.model,
            trace: self.trace,
            saturated: self.saturated,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DwOutcome {
    pub model: WeightModel,
    pub trace: Vec<BatchLosses>,
    pub saturated: usize,
}

/// Trains weights for `cfg.steps` minibatches drawn from `init_sampler`
/// (uniform when `None`).
pub fn train_dw(
    ds: &TransitionDataset,
    cfg: &DwConfig,
    init_sampler: Option<&SamplerWeights>,
) -> Result<DwOutcome> {
    cfg.validate()?;
    let uniform;
    let sampler = match init_sampler {
        Some(s) => s,
        None => {
            uniform = uniform_sampler(ds)?;
            &uniform
        }
    };
    let mut trainer = DwTrainer::new(WeightModel::for_dataset(ds)?, *cfg)?;
    let mut rng = seeded_rng(cfg.seed);
    let records = ds.records();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.steps {
        batch.clear();
        batch.extend(draw_minibatch(sampler, cfg.batch_size, &mut rng).into_iter().map(|i| &records[i]));
        trainer.step(&batch)?;
    }
    Ok(trainer.into_outcome())
}

/// `sum_i w_bar_i r_i` over the whole dataset, the reweighted per-step reward.
pub fn reweighted_reward(model: &WeightModel, ds: &TransitionDataset) -> f64 {
    let w = model.record_weights(ds);
    let total: f64 = w.iter().sum();
    w.iter().zip(ds.records()).map(|(w, r)| w / total * r.r).sum()
}

/// Full-dataset divergence `sum_i w_bar_i ln(w_bar_i N)` of the reweighted
/// data from the data.
pub fn dataset_kl(model: &WeightModel, ds: &TransitionDataset) -> f64 {
    let w = model.record_weights(ds);
    let total: f64 = w.iter().sum();
    let n = w.len() as f64;
    w.iter()
        .map(|x| x / total)
        .map(|wb| wb * (wb * n).ln())
        .sum()
}

/// Draws a uniform minibatch and returns its record references.
pub fn uniform_batch<'a, R: Rng + ?Sized>(
    ds: &'a TransitionDataset,
    batch_size: usize,
    rng: &mut R,
) -> Vec<&'a TransitionRecord> {
    (0..batch_size)
        .map(|_| &ds.records()[rng.random_range(0..ds.len())])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptDiceConfig {
    pub alpha: f64,
    pub step_size: f64,
    pub steps: usize,
}

impl Default for OptDiceConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            step_size: 1e-2,
            steps: 5_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptDiceWeights {
    pub nu: Vec<f64>,
    /// Mean weight over each (s,a)'s occurrences; zero where unseen.
    pub sa_weights: Vec<f64>,
    pub record_weights: Vec<f64>,
}

/// Exponent cap for `exp(e / alpha - 1)`.
const OPTDICE_EXP_CAP: f64 = 30.0;

/// `w = max(0, exp(e/alpha - 1))` for an advantage-like residual `e`.
pub fn optdice_weight(e: f64, alpha: f64) -> f64 {
    (e / alpha - 1.0).min(OPTDICE_EXP_CAP).exp().max(0.0)
}

/// Residual `r + gamma nu(s') - nu(s)` with terminal successors valued at 0.
pub fn optdice_residual(rec: &TransitionRecord, nu: &[f64], gamma: f64) -> f64 {
    let next = if rec.terminal { 0.0 } else { nu[rec.s_next] };
    rec.r + gamma * next - nu[rec.s]
}

/// OptDiCE objective with `f(x) = x ln x`, which after substituting the
/// closed-form inner maximizer reduces to
/// `alpha E[exp(e/alpha - 1)] + (1 - gamma) E_rho0[nu(s0)]`.
pub fn optdice_objective(ds: &TransitionDataset, nu: &[f64], alpha: f64) -> f64 {
    let gamma = ds.meta().gamma;
    let n = ds.len() as f64;
    let data_term: f64 = ds
        .records()
        .iter()
        .map(|rec| {
            let e = optdice_residual(rec, nu, gamma);
            let w = optdice_weight(e, alpha);
            e * w - alpha * w * w.ln()
        })
        .sum::<f64>()
        / n;
    let init: f64 = ds
        .initial_state_dist()
        .iter()
        .zip(nu)
        .map(|(p, v)| p * v)
        .sum();
    data_term + (1.0 - gamma) * init
}

/// Minimizes the OptDiCE dual over a state table `nu` by full-batch
/// gradient descent and returns the induced weights.
pub fn optdice_weights(ds: &TransitionDataset, cfg: &OptDiceConfig) -> Result<OptDiceWeights> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::config("OptDiCE alpha must be positive"));
    }
    let gamma = ds.meta().gamma;
    let n_states = ds.meta().num_states;
    let rho0 = ds.initial_state_dist();
    let mut nu = vec![0.0; n_states];
    let mut opt = Adam::new(n_states, cfg.step_size);
    let n = ds.len() as f64;
    let mut grad = vec![0.0; n_states];
    for step in 0..cfg.steps {
        grad.iter_mut()
            .zip(&rho0)
            .for_each(|(g, p)| *g = (1.0 - gamma) * p);
        for rec in ds.records() {
            let w = optdice_weight(optdice_residual(rec, &nu, gamma), cfg.alpha) / n;
            grad[rec.s] -= w;
            if !rec.terminal {
                grad[rec.s_next] += gamma * w;
            }
        }
        opt.step(&mut nu, &grad);
        if nu.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(
                format!("OptDiCE nu became non-finite at step {step}"),
                f64::NAN,
            ));
        }
    }
    let record_weights: Vec<f64> = ds
        .records()
        .iter()
        .map(|rec| optdice_weight(optdice_residual(rec, &nu, gamma), cfg.alpha))
        .collect();
    let na = ds.meta().num_actions;
    let mut sums = vec![0.0; n_states * na];
    let mut counts = vec![0usize; n_states * na];
    for (rec, w) in ds.records().iter().zip(&record_weights) {
        sums[rec.s * na + rec.a] += w;
        counts[rec.s * na + rec.a] += 1;
    }
    let sa_weights = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    Ok(OptDiceWeights {
        nu,
        sa_weights,
        record_weights,
    })
}
