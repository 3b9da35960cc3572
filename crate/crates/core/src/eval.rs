//! Scoring and aggregation: final scores, interquartile means, percentile
//! bootstrap intervals and per-method reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use crate::sampling::percentile_sorted;

/// Evaluation rounds averaged into a run's final score.
pub const FINAL_ROUNDS: usize = 10;
pub const DEFAULT_RESAMPLES: usize = 2000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Interquartile mean: drops `floor(n/4)` values from each end of the
/// sorted sample and averages the rest.
pub fn iqm(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::config("iqm of an empty sample"));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(iqm_sorted(&sorted))
}

fn iqm_sorted(sorted: &[f64]) -> f64 {
    let cut = sorted.len() / 4;
    let kept = &sorted[cut..sorted.len() - cut];
    kept.iter().sum::<f64>() / kept.len() as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Percentile bootstrap interval for `statistic` at confidence `level`.
pub fn bootstrap_ci<F>(xs: &[f64], statistic: F, n_resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&[f64]) -> f64,
{
    if xs.is_empty() {
        return Err(Error::config("bootstrap of an empty sample"));
    }
    if n_resamples < 1000 {
        return Err(Error::config(format!("bootstrap needs at least 1000 resamples, got {n_resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let mut rng = seeded_rng(seed);
    let mut sample = vec![0.0; xs.len()];
    let mut stats: Vec<f64> = (0..n_resamples)
        .map(|_| {
            for slot in sample.iter_mut() {
                *slot = xs[rng.random_range(0..xs.len())];
            }
            statistic(&sample)
        })
        .collect();
    stats.sort_by(|a, b| a.total_cmp(b));
    let tail = (1.0 - level) / 2.0 * 100.0;
    Ok((percentile_sorted(&stats, tail), percentile_sorted(&stats, 100.0 - tail)))
}

/// Mean of the last `min(last_k, len)` trace values.
pub fn final_score(trace: &[(usize, f64)], last_k: usize) -> Result<f64> {
    if trace.is_empty() || last_k == 0 {
        return Err(Error::config("final score needs a non-empty trace and last_k >= 1"));
    }
    let tail = &trace[trace.len().saturating_sub(last_k)..];
    Ok(tail.iter().map(|&(_, v)| v).sum::<f64>() / tail.len() as f64)
}

/// One training run's evaluation trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub dataset_id: String,
    pub method_id: String,
    pub seed: u64,
    /// `(gradient step, mean return over the evaluation episodes)`.
    pub trace: Vec<(usize, f64)>,
}

impl RunResult {
    pub fn new(dataset_id: impl Into<String>, method_id: impl Into<String>, seed: u64) -> Self {
        Self {
            dataset_id: dataset_id.into(),
            method_id: method_id.into(),
            seed,
            trace: Vec::new(),
        }
    }

    pub fn push(&mut self, step: usize, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.trace.last() {
            if step <= last {
                return Err(Error::config(format!("trace steps must increase ({last} then {step})")));
            }
        }
        self.trace.push((step, value));
        Ok(())
    }

    pub fn final_score(&self) -> Result<f64> {
        final_score(&self.trace, FINAL_ROUNDS)
    }

    /// `seed,step,mean_return_20ep` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "seed,step,mean_return_20ep")?;
        for (step, value) in &self.trace {
            writeln!(out, "{},{},{}", self.seed, step, value)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(
        input: R,
        dataset_id: impl Into<String>,
        method_id: impl Into<String>,
    ) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != "seed,step,mean_return_20ep" {
            return Err(Error::Parse {
                line: 1,
                message: "expected header seed,step,mean_return_20ep".into(),
            });
        }
        let mut run = RunResult::new(dataset_id, method_id, 0);
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: &str| Error::Parse {
                line: idx + 2,
                message: message.to_string(),
            };
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != 3 {
                return Err(bad("expected 3 fields"));
            }
            run.seed = fields[0].parse().map_err(|_| bad("bad seed"))?;
            let step = fields[1].parse().map_err(|_| bad("bad step"))?;
            let value = fields[2].parse().map_err(|_| bad("bad return"))?;
            run.push(step, value).map_err(|e| bad(&e.to_string()))?;
        }
        Ok(run)
    }
}

/// Score normalization anchors per dataset id.
pub type Anchors = BTreeMap<String, (f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub iqm: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
}

/// A normalized final score for one (method, dataset, seed) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub methods: Vec<MethodSummary>,
    pub cells: Vec<Cell>,
}

impl AggregateReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,iqm,ci_lo,ci_hi,n")?;
        for m in &self.methods {
            writeln!(out, "{},{},{},{},{}", m.method, m.iqm, m.ci_lo, m.ci_hi, m.n)?;
        }
        Ok(())
    }

    /// Plot-ready long format, one normalized score per row.
    pub fn write_long_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "method,dataset,seed,score")?;
        for c in &self.cells {
            writeln!(out, "{},{},{},{}", c.method, c.dataset, c.seed, c.score)?;
        }
        Ok(())
    }
}

pub fn normalize(score: f64, (low, high): (f64, f64)) -> Result<f64> {
    if !(high > low) {
        return Err(Error::config(format!("degenerate normalization anchors ({low}, {high})")));
    }
    Ok((score - low) / (high - low))
}

/// Normalizes every run's final score with its dataset's anchors, pools
/// the cells of each method and reports IQM with a bootstrap interval.
/// Every method must cover the same set of datasets.
pub fn aggregate(results: &[RunResult], anchors: &Anchors, n_resamples: usize, seed: u64) -> Result<AggregateReport> {
    if results.is_empty() {
        return Err(Error::config("nothing to aggregate"));
    }
    let mut by_method: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        by_method.entry(r.method_id.as_str()).or_default().push(r);
    }
    let datasets_of = |runs: &[&RunResult]| -> BTreeSet<String> { runs.iter().map(|r| r.dataset_id.clone()).collect() };
    let reference = datasets_of(by_method.values().next().expect("non-empty"));
    let mut methods = Vec::new();
    let mut cells = Vec::new();
    for (method, runs) in &by_method {
        if datasets_of(runs) != reference {
            return Err(Error::config(format!("method {method} covers a different set of datasets")));
        }
        let mut scores = Vec::with_capacity(runs.len());
        for r in runs {
            let anchor = anchors
                .get(&r.dataset_id)
                .ok_or_else(|| Error::config(format!("no normalization anchors for dataset {}", r.dataset_id)))?;
            let score = normalize(r.final_score()?, *anchor)?;
            scores.push(score);
            cells.push(Cell {
                method: method.to_string(),
                dataset: r.dataset_id.clone(),
                seed: r.seed,
                score,
            });
        }
        let point = iqm(&scores)?;
        let (lo, hi) = bootstrap_ci(
            &scores,
            |xs| {
                let mut v = xs.to_vec();
                v.sort_by(|a, b| a.total_cmp(b));
                iqm_sorted(&v)
            },
            n_resamples,
            DEFAULT_LEVEL,
            seed,
        )?;
        methods.push(MethodSummary {
            method: method.to_string(),
            iqm: point,
            ci_lo: lo.min(point),
            ci_hi: hi.max(point),
            n: scores.len(),
        });
    }
    Ok(AggregateReport { methods, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iqm_of_one_to_eight() {
        let xs: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(iqm(&xs).unwrap(), 4.5);
        assert_eq!(iqm(&[3.0; 7]).unwrap(), 3.0);
        assert!(iqm(&[]).is_err());
    }

    #[test]
    fn bootstrap_of_constant_data() {
        let (lo, hi) = bootstrap_ci(&[2.5; 20], mean, 1000, 0.95, 1).unwrap();
        assert_eq!((lo, hi), (2.5, 2.5));
        assert!(bootstrap_ci(&[1.0, 2.0], mean, 999, 0.95, 1).is_err());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let xs: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let a = bootstrap_ci(&xs, mean, 2000, 0.95, 7).unwrap();
        let b = bootstrap_ci(&xs, mean, 2000, 0.95, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.0 < mean(&xs) && mean(&xs) < a.1);
    }

    #[test]
    fn final_score_examples() {
        assert_eq!(final_score(&[(1, 0.3)], 10).unwrap(), 0.3);
        let trace: Vec<(usize, f64)> = (0..25).map(|i| (i, if i >= 15 { 1.0 } else { 0.0 })).collect();
        assert_eq!(final_score(&trace, 10).unwrap(), 1.0);
        assert!(final_score(&[], 10).is_err());
    }

    #[test]
    fn run_csv_round_trip() {
        let mut run = RunResult::new("d", "m", 4);
        run.push(500, 0.25).unwrap();
        run.push(1000, 0.5).unwrap();
        assert!(run.push(1000, 0.5).is_err());
        let mut buf = Vec::new();
        run.write_csv(&mut buf).unwrap();
        let back = RunResult::read_csv(&buf[..], "d", "m").unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn aggregate_single_cell() {
        let mut run = RunResult::new("d", "m", 0);
        run.push(1, 0.75).unwrap();
        let anchors = Anchors::from([("d".to_string(), (0.0, 1.0))]);
        let report = aggregate(&[run], &anchors, 1000, 0).unwrap();
        let m = report.method("m").unwrap();
        assert_eq!((m.iqm, m.ci_lo, m.ci_hi, m.n), (0.75, 0.75, 0.75, 1));
    }

    #[test]
    fn aggregate_rejects_mismatched_datasets() {
        let mut a = RunResult::new("d1", "m1", 0);
        a.push(1, 0.5).unwrap();
        let mut b = RunResult::new("d2", "m2", 0);
        b.push(1, 0.5).unwrap();
        let anchors = Anchors::from([("d1".to_string(), (0.0, 1.0)), ("d2".to_string(), (0.0, 1.0))]);
        assert!(aggregate(&[a, b], &anchors, 1000, 0).is_err());
    }
}
