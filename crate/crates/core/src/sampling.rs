//! Per-transition sampling distributions for the baselines (uniform,
//! advantage weighting, percentage filtering) and for arbitrary weight
//! sources, plus i.i.d. minibatch draws from them.

use std::collections::HashMap;
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::dataset::{ReturnKind, TransitionDataset, TransitionRecord};
use crate::error::{Error, Result};

/// Named AW temperatures. CQL and IQL differ only in the medium level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AwPreset {
    Low,
    Medium,
    High,
    ExtraHigh,
}

impl AwPreset {
    pub fn cql_eta(self) -> f64 {
        match self {
            AwPreset::Low => 0.01,
            AwPreset::Medium => 0.1,
            AwPreset::High => 1.0,
            AwPreset::ExtraHigh => 5.0,
        }
    }

    pub fn iql_eta(self) -> f64 {
        match self {
            AwPreset::Medium => 0.2,
            other => other.cql_eta(),
        }
    }
}

impl std::str::FromStr for AwPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L" => Ok(AwPreset::Low),
            "M" => Ok(AwPreset::Medium),
            "H" => Ok(AwPreset::High),
            "XH" => Ok(AwPreset::ExtraHigh),
            other => Err(Error::config(format!("unknown AW preset '{other}'"))),
        }
    }
}

/// Percentages supported by the PF sweep.
pub const PF_SWEEP: [f64; 3] = [10.0, 20.0, 50.0];

#[derive(Debug, Clone, PartialEq)]
pub enum SamplerTag {
    Uniform,
    Aw { eta: f64 },
    Pf { k: f64 },
    Dw,
    OptDice,
}

impl fmt::Display for SamplerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplerTag::Uniform => write!(f, "uniform"),
            SamplerTag::Aw { eta } => write!(f, "aw({eta})"),
            SamplerTag::Pf { k } => write!(f, "pf({k})"),
            SamplerTag::Dw => write!(f, "dw"),
            SamplerTag::OptDice => write!(f, "optdice"),
        }
    }
}

/// A probability for every record of a dataset.
#[derive(Debug, Clone)]
pub struct SamplerWeights {
    p: Vec<f64>,
    tag: SamplerTag,
    index: WeightedIndex<f64>,
}

impl SamplerWeights {
    /// Normalizes non-negative per-record weights into a sampler.
    pub fn from_weights(weights: &[f64], tag: SamplerTag) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("sampler over an empty dataset"));
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::config("sampler weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::config("sampler weights have no mass"));
        }
        let p: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let index = WeightedIndex::new(&p).map_err(|e| Error::config(e.to_string()))?;
        Ok(Self { p, tag, index })
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn tag(&self) -> &SamplerTag {
        &self.tag
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        -self
            .p
            .iter()
            .filter(|&&x| x > 0.0)
            .map(|x| x * x.ln())
            .sum::<f64>()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }

    /// Probability mass per (s,a) pair, row-major.
    pub fn sa_mass(&self, ds: &TransitionDataset) -> Vec<f64> {
        let na = ds.meta().num_actions;
        let mut mass = vec![0.0; ds.meta().num_states * na];
        for (rec, p) in ds.records().iter().zip(&self.p) {
            mass[rec.s * na + rec.a] += p;
        }
        mass
    }
}

pub fn uniform_sampler(ds: &TransitionDataset) -> Result<SamplerWeights> {
    SamplerWeights::from_weights(&vec![1.0; ds.len()], SamplerTag::Uniform)
}

/// Spreads per-trajectory probabilities evenly over each trajectory's records.
fn split_over_transitions(ds: &TransitionDataset, traj_probs: &[f64], tag: SamplerTag) -> Result<SamplerWeights> {
    let mut weights = vec![0.0; ds.len()];
    for (span, &pt) in ds.spans().iter().zip(traj_probs) {
        let share = pt / span.len() as f64;
        weights[span.clone()].fill(share);
    }
    SamplerWeights::from_weights(&weights, tag)
}

/// Advantage weighting: trajectory probability proportional to
/// `exp((G - V0(s0)) / eta)`, where `V0(s0)` is the mean return of the
/// dataset trajectories sharing that exact initial state.
pub fn aw_sampler(ds: &TransitionDataset, eta: f64) -> Result<SamplerWeights> {
    if !(eta > 0.0) {
        return Err(Error::config(format!("AW temperature must be positive, got {eta}")));
    }
    let summaries = ds.summaries();
    let mut by_start: HashMap<usize, (f64, usize)> = HashMap::new();
    for s in &summaries {
        let entry = by_start.entry(s.s0).or_default();
        entry.0 += s.ret;
        entry.1 += 1;
    }
    let logits: Vec<f64> = summaries
        .iter()
        .map(|s| {
            let (sum, n) = by_start[&s.s0];
            (s.ret - sum / n as f64) / eta
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    let traj_probs: Vec<f64> = unnorm.iter().map(|u| u / total).collect();
    split_over_transitions(ds, &traj_probs, SamplerTag::Aw { eta })
}

/// Linear-interpolation percentile (`q` in [0, 100]) of unsorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&sorted, q)
}

pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Percentage filtering: the top `k` percent of trajectories by return
/// share the mass equally, everything else gets zero.
pub fn pf_sampler(ds: &TransitionDataset, k: f64) -> Result<SamplerWeights> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::config(format!("PF percentage must lie in (0, 100], got {k}")));
    }
    let returns = ds.returns(ReturnKind::Discounted);
    if returns.is_empty() {
        return Err(Error::config("dataset has no trajectories"));
    }
    let threshold = percentile(&returns, 100.0 - k);
    let selected: Vec<f64> = returns
        .iter()
        .map(|&g| if g >= threshold { 1.0 } else { 0.0 })
        .collect();
    split_over_transitions(ds, &selected, SamplerTag::Pf { k })
}

/// i.i.d. draws with replacement; returns record indices.
pub fn draw_minibatch<R: Rng + ?Sized>(sw: &SamplerWeights, batch_size: usize, rng: &mut R) -> Vec<usize> {
    (0..batch_size).map(|_| sw.draw(rng)).collect()
}

/// Like [`draw_minibatch`] but resolves the indices to records.
pub fn draw_records<'a, R: Rng + ?Sized>(
    ds: &'a TransitionDataset,
    sw: &SamplerWeights,
    batch_size: usize,
    rng: &mut R,
) -> Vec<&'a TransitionRecord> {
    draw_minibatch(sw, batch_size, rng)
        .into_iter()
        .map(|i| &ds.records()[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMeta;
    use crate::rng::seeded_rng;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            env_name: "toy".into(),
            num_states: 3,
            num_actions: 2,
            gamma: 1.0,
            score_low: 0.0,
            score_high: 1.0,
            curation: "test".into(),
        }
    }

    /// One trajectory per entry: `(s0, len, return)`; the return sits on the last step.
    fn dataset(specs: &[(usize, usize, f64)]) -> TransitionDataset {
        let trajs: Vec<Vec<TransitionRecord>> = specs
            .iter()
            .map(|&(s0, len, g)| {
                (0..len)
                    .map(|t| TransitionRecord {
                        traj_id: 0,
                        t,
                        s: if t == 0 { s0 } else { 2 },
                        a: t % 2,
                        r: if t + 1 == len { g } else { 0.0 },
                        s_next: 2,
                        terminal: false,
                        timeout: false,
                    })
                    .collect()
            })
            .collect();
        TransitionDataset::from_trajectories(trajs, meta()).unwrap()
    }

    fn traj_mass(ds: &TransitionDataset, sw: &SamplerWeights) -> Vec<f64> {
        ds.spans().iter().map(|r| sw.probs()[r.clone()].iter().sum()).collect()
    }

    #[test]
    fn uniform_over_four_records() {
        let ds = dataset(&[(0, 4, 0.0)]);
        let sw = uniform_sampler(&ds).unwrap();
        assert!(sw.probs().iter().all(|&p| p == 0.25));
        assert!((sw.entropy() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aw_two_trajectory_example() {
        let ds = dataset(&[(0, 3, 0.0), (0, 5, 1.0)]);
        let sw = aw_sampler(&ds, 1.0).unwrap();
        let m = traj_mass(&ds, &sw);
        assert!((m[0] - 0.268_941_421_369_995).abs() < 1e-12);
        assert!((m[1] - 0.731_058_578_630_005).abs() < 1e-12);
        // constant within a trajectory
        assert!(sw.probs()[3..8].windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn aw_equal_returns_and_hot_temperature_are_uniform() {
        let ds = dataset(&[(0, 2, 0.5), (0, 3, 0.5), (1, 4, 0.5)]);
        let m = traj_mass(&ds, &aw_sampler(&ds, 0.1).unwrap());
        assert!(m.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));

        let ds = dataset(&[(0, 2, 0.0), (0, 3, 1.0), (0, 4, 5.0)]);
        let m = traj_mass(&ds, &aw_sampler(&ds, 1e9).unwrap());
        assert!(m.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-8));
    }

    #[test]
    fn aw_baseline_is_per_initial_state() {
        // Each start state has one trajectory, so every advantage is zero.
        let ds = dataset(&[(0, 2, 0.0), (1, 2, 1.0)]);
        let m = traj_mass(&ds, &aw_sampler(&ds, 0.5).unwrap());
        assert!((m[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pf_percentile_selection() {
        let ds = dataset(&[(0, 2, 1.0), (0, 2, 2.0), (0, 2, 3.0), (0, 2, 4.0)]);
        let m = traj_mass(&ds, &pf_sampler(&ds, 50.0).unwrap());
        assert_eq!(m, vec![0.0, 0.0, 0.5, 0.5]);
        let all = traj_mass(&ds, &pf_sampler(&ds, 100.0).unwrap());
        assert!(all.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        assert!(pf_sampler(&ds, 0.0).is_err());
    }

    #[test]
    fn pf_degenerate_returns_select_everything() {
        let ds = dataset(&[(0, 2, 1.0), (0, 3, 1.0), (0, 4, 1.0)]);
        let m = traj_mass(&ds, &pf_sampler(&ds, 10.0).unwrap());
        assert!(m.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn minibatch_point_mass_and_seeding() {
        let ds = dataset(&[(0, 5, 0.0)]);
        let mut w = vec![0.0; 5];
        w[3] = 2.0;
        let sw = SamplerWeights::from_weights(&w, SamplerTag::Dw).unwrap();
        let batch = draw_minibatch(&sw, 16, &mut seeded_rng(1));
        assert!(batch.iter().all(|&i| i == 3));

        let uni = uniform_sampler(&ds).unwrap();
        let a = draw_minibatch(&uni, 32, &mut seeded_rng(5));
        let b = draw_minibatch(&uni, 32, &mut seeded_rng(5));
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_invalid_weights() {
        assert!(SamplerWeights::from_weights(&[], SamplerTag::Dw).is_err());
        assert!(SamplerWeights::from_weights(&[0.0, 0.0], SamplerTag::Dw).is_err());
        assert!(SamplerWeights::from_weights(&[1.0, -1.0], SamplerTag::Dw).is_err());
        assert!(SamplerWeights::from_weights(&[1.0, f64::NAN], SamplerTag::Dw).is_err());
    }
}
