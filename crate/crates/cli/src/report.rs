//! The `report` and `fourroom-figure` subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dwrl::dataset::TransitionDataset;
use dwrl::eval::{aggregate, Anchors, RunResult, DEFAULT_RESAMPLES};
use dwrl::experiment::{optimal_column, tv_distance, weighted_column, write_columns, DistributionColumn};

use crate::run::{run_dir, Manifest, RunEntry};

const BOOTSTRAP_SEED: u64 = 0;

fn load_result(runs_dir: &Path, run: &RunEntry) -> Result<RunResult> {
    let path = run_dir(runs_dir, &run.dataset, &run.method).join(format!("seed{}.csv", run.seed));
    let file = fs::File::open(&path).with_context(|| format!("missing result {}", path.display()))?;
    Ok(RunResult::read_csv(BufReader::new(file), &run.dataset, &run.method)?)
}

fn write_report(results: &[RunResult], anchors: &Anchors, out: &Path, stem: &str) -> Result<()> {
    let report = aggregate(results, anchors, DEFAULT_RESAMPLES, BOOTSTRAP_SEED)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    fs::write(out.join(format!("{stem}.csv")), buf)?;
    let mut buf = Vec::new();
    report.write_long_csv(&mut buf)?;
    fs::write(out.join(format!("{stem}_long.csv")), buf)?;
    Ok(())
}

/// Writes `report.csv` pooled over all datasets and one `report_<group>.csv`
/// per dataset group, each with a long-format companion. Returns the
/// number of runs aggregated.
pub fn report(runs_dir: &Path, out: &Path) -> Result<usize> {
    let manifest = Manifest::load(runs_dir)?;
    let ok: Vec<&RunEntry> = manifest.runs.iter().filter(|r| r.ok).collect();
    if ok.is_empty() {
        bail!("no successful runs in {}", runs_dir.display());
    }
    let anchors: Anchors = manifest
        .datasets
        .iter()
        .map(|d| (d.id.clone(), (d.score_low, d.score_high)))
        .collect();
    let group_of: BTreeMap<&str, &str> = manifest.datasets.iter().map(|d| (d.id.as_str(), d.group.as_str())).collect();
    let mut results = Vec::with_capacity(ok.len());
    let mut groups: BTreeMap<&str, Vec<RunResult>> = BTreeMap::new();
    for run in ok {
        let r = load_result(runs_dir, run)?;
        let group = group_of
            .get(run.dataset.as_str())
            .with_context(|| format!("run references unknown dataset {}", run.dataset))?;
        groups.entry(group).or_default().push(r.clone());
        results.push(r);
    }
    fs::create_dir_all(out)?;
    write_report(&results, &anchors, out, "report")?;
    for (group, runs) in &groups {
        write_report(runs, &anchors, out, &format!("report_{group}"))?;
    }
    Ok(results.len())
}

fn read_sa_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("s,a,w") {
        bail!("{}: expected header s,a,w", path.display());
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.rsplit(',')
                .next()
                .and_then(|w| w.trim().parse::<f64>().ok())
                .with_context(|| format!("{}: bad weight on line {}", path.display(), i + 2))
        })
        .collect()
}

pub const FIGURE_WEIGHTINGS: [&str; 3] = ["pf", "aw", "dw"];

/// Distribution columns for one dataset: behavior, optimal, then the first
/// successful PF, AW and DW runs in the manifest. `seed` restricts the
/// runs considered.
pub fn figure_columns(runs_dir: &Path, dataset: Option<&str>, seed: Option<u64>) -> Result<(Vec<DistributionColumn>, usize)> {
    let manifest = Manifest::load(runs_dir)?;
    let entry = match dataset {
        Some(id) => manifest
            .datasets
            .iter()
            .find(|d| d.id == id)
            .with_context(|| format!("dataset {id} is not part of this run directory"))?,
        None => match manifest.datasets.as_slice() {
            [only] => only,
            _ => bail!("run directory holds several datasets; pick one with --dataset"),
        },
    };
    let env = manifest.env()?;
    let mdp = &env.mdp;
    let ds = TransitionDataset::load(&entry.path).with_context(|| format!("loading dataset {}", entry.id))?;
    let mut columns = vec![
        DistributionColumn::new("behavior", &ds.sa_counts(), mdp)?,
        optimal_column(mdp)?,
    ];
    let mut missing = Vec::new();
    for weighting in FIGURE_WEIGHTINGS {
        let run = manifest.runs.iter().find(|r| {
            r.ok && r.dataset == entry.id && r.weighting == weighting && seed.is_none_or(|s| s == r.seed)
        });
        match run {
            Some(run) => {
                let path = run_dir(runs_dir, &run.dataset, &run.method).join(format!("weights_seed{}.csv", run.seed));
                let w = read_sa_csv(&path)?;
                if w.len() != mdp.num_state_actions() {
                    bail!("{} has {} entries, expected {}", path.display(), w.len(), mdp.num_state_actions());
                }
                columns.push(weighted_column(weighting, &ds, &w, mdp)?);
            }
            None => missing.push(weighting),
        }
    }
    if !missing.is_empty() {
        bail!(
            "missing successful {} runs for dataset {}{}",
            missing.join(", "),
            entry.id,
            seed.map(|s| format!(" with seed {s}")).unwrap_or_default()
        );
    }
    Ok((columns, mdp.num_actions()))
}

/// Writes the figure CSV and returns each column's total-variation
/// distance to the optimal column.
pub fn figure(runs_dir: &Path, dataset: Option<&str>, seed: Option<u64>, out: &Path) -> Result<Vec<(String, f64)>> {
    let (columns, na) = figure_columns(runs_dir, dataset, seed)?;
    let mut buf = Vec::new();
    write_columns(&mut buf, &columns, na)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, buf)?;
    let optimal = &columns[1];
    columns
        .iter()
        .filter(|c| c.name != optimal.name)
        .map(|c| Ok((c.name.clone(), tv_distance(&c.d, &optimal.d)?)))
        .collect()
}
