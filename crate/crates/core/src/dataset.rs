//! Offline datasets of transitions, mixture curation and imbalance metrics.
//!
//! On disk a dataset is plain text: one header line
//! `# key=value key=value ...` carrying the metadata, then one record per
//! line as `traj_id t s a r s_next terminal timeout`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{rollout, TabularMdp, TabularPolicy};
use crate::rng::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRecord {
    pub traj_id: usize,
    pub t: usize,
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub terminal: bool,
    pub timeout: bool,
}

impl TransitionRecord {
    /// Equality of everything except the trajectory id.
    pub fn same_transition(&self, other: &Self) -> bool {
        self.t == other.t
            && self.s == other.s
            && self.a == other.a
            && self.r.to_bits() == other.r.to_bits()
            && self.s_next == other.s_next
            && self.terminal == other.terminal
            && self.timeout == other.timeout
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub env_name: String,
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    /// Normalization anchors for evaluation scores.
    pub score_low: f64,
    pub score_high: f64,
    pub curation: String,
}

impl DatasetMeta {
    pub fn for_mdp(env_name: &str, mdp: &TabularMdp) -> Self {
        Self {
            env_name: env_name.to_string(),
            num_states: mdp.num_states(),
            num_actions: mdp.num_actions(),
            gamma: mdp.gamma(),
            score_low: 0.0,
            score_high: 1.0,
            curation: "collected".to_string(),
        }
    }

    fn same_env(&self, other: &Self) -> bool {
        self.env_name == other.env_name
            && self.num_states == other.num_states
            && self.num_actions == other.num_actions
            && self.gamma == other.gamma
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySummary {
    pub traj_id: usize,
    pub len: usize,
    /// Discounted return with the dataset's gamma.
    pub ret: f64,
    pub undiscounted: f64,
    pub s0: usize,
}

/// Which trajectory return a metric is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReturnKind {
    #[default]
    Discounted,
    Undiscounted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    records: Vec<TransitionRecord>,
    meta: DatasetMeta,
    spans: Vec<Range<usize>>,
}

impl TransitionDataset {
    /// Validates trajectory blocks and id bounds.
    pub fn new(records: Vec<TransitionRecord>, meta: DatasetMeta) -> Result<Self> {
        if meta.env_name.is_empty()
            || meta.env_name.contains(char::is_whitespace)
            || meta.env_name.contains('=')
            || meta.curation.contains(char::is_whitespace)
            || meta.curation.contains('=')
        {
            return Err(Error::config("meta strings must be non-empty without spaces or '='"));
        }
        let mut spans: Vec<Range<usize>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (i, rec) in records.iter().enumerate() {
            if rec.s >= meta.num_states || rec.s_next >= meta.num_states || rec.a >= meta.num_actions {
                return Err(Error::config(format!("record {i} has out-of-range ids")));
            }
            if rec.terminal && rec.timeout {
                return Err(Error::config(format!("record {i} is both terminal and timeout")));
            }
            let starts_block = i == 0 || records[i - 1].traj_id != rec.traj_id;
            if starts_block {
                if !seen.insert(rec.traj_id) {
                    return Err(Error::config(format!(
                        "trajectory {} is not contiguous",
                        rec.traj_id
                    )));
                }
                if rec.t != 0 {
                    return Err(Error::config(format!(
                        "trajectory {} does not start at t=0",
                        rec.traj_id
                    )));
                }
                spans.push(i..i + 1);
            } else {
                if rec.t != records[i - 1].t + 1 {
                    return Err(Error::config(format!(
                        "trajectory {} has non-consecutive timesteps",
                        rec.traj_id
                    )));
                }
                spans.last_mut().expect("block open").end = i + 1;
            }
        }
        Ok(Self {
            records,
            meta,
            spans,
        })
    }

    /// Assembles a dataset from trajectories, numbering them in order.
    pub fn from_trajectories<I>(trajectories: I, meta: DatasetMeta) -> Result<Self>
    where
        I: IntoIterator,
        I::Item: AsRef<[TransitionRecord]>,
    {
        let mut records = Vec::new();
        for (id, traj) in trajectories.into_iter().enumerate() {
            records.extend(traj.as_ref().iter().enumerate().map(|(t, rec)| TransitionRecord {
                traj_id: id,
                t,
                ..*rec
            }));
        }
        Self::new(records, meta)
    }

    pub fn records(&self) -> &[TransitionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut DatasetMeta {
        &mut self.meta
    }

    pub fn num_trajectories(&self) -> usize {
        self.spans.len()
    }

    /// Record index ranges, one per trajectory in file order.
    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    pub fn trajectory(&self, idx: usize) -> &[TransitionRecord] {
        &self.records[self.spans[idx].clone()]
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &[TransitionRecord]> {
        self.spans.iter().map(|r| &self.records[r.clone()])
    }

    pub fn summaries(&self) -> Vec<TrajectorySummary> {
        let gamma = self.meta.gamma;
        self.trajectories()
            .map(|traj| {
                let mut ret = 0.0;
                let mut discount = 1.0;
                let mut undiscounted = 0.0;
                for rec in traj {
                    ret += discount * rec.r;
                    undiscounted += rec.r;
                    discount *= gamma;
                }
                TrajectorySummary {
                    traj_id: traj[0].traj_id,
                    len: traj.len(),
                    ret,
                    undiscounted,
                    s0: traj[0].s,
                }
            })
            .collect()
    }

    pub fn returns(&self, kind: ReturnKind) -> Vec<f64> {
        self.summaries()
            .into_iter()
            .map(|s| match kind {
                ReturnKind::Discounted => s.ret,
                ReturnKind::Undiscounted => s.undiscounted,
            })
            .collect()
    }

    /// Number of occurrences of each (s,a) pair, row-major.
    pub fn sa_counts(&self) -> Vec<f64> {
        let na = self.meta.num_actions;
        let mut counts = vec![0.0; self.meta.num_states * na];
        for rec in &self.records {
            counts[rec.s * na + rec.a] += 1.0;
        }
        counts
    }

    /// Empirical initial-state distribution from trajectory heads.
    pub fn initial_state_dist(&self) -> Vec<f64> {
        let mut dist = vec![0.0; self.meta.num_states];
        let n = self.spans.len() as f64;
        for span in &self.spans {
            dist[self.records[span.start].s] += 1.0 / n;
        }
        dist
    }

    /// Mean reward per transition.
    pub fn mean_reward(&self) -> f64 {
        self.records.iter().map(|r| r.r).sum::<f64>() / self.records.len() as f64
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut text = format!(
            "# env_name={} num_states={} num_actions={} gamma={} score_low={} score_high={} curation={}\n",
            m.env_name, m.num_states, m.num_actions, m.gamma, m.score_low, m.score_high, m.curation
        );
        for rec in &self.records {
            writeln!(
                text,
                "{} {} {} {} {} {} {} {}",
                rec.traj_id,
                rec.t,
                rec.s,
                rec.a,
                rec.r,
                rec.s_next,
                rec.terminal as u8,
                rec.timeout as u8
            )
            .expect("writing to a String cannot fail");
        }
        text
    }

    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or(Error::Parse {
                line: 1,
                message: "empty dataset file".into(),
            })??;
        let meta = parse_header(&header)?;
        let mut records = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(parse_record(&line, idx + 2)?);
        }
        Self::new(records, meta)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn parse_header(line: &str) -> Result<DatasetMeta> {
    let err = |message: String| Error::Parse { line: 1, message };
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| err("header must start with '#'".into()))?;
    let mut fields = std::collections::HashMap::new();
    for token in body.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| err(format!("malformed header token '{token}'")))?;
        fields.insert(k, v);
    }
    fn get<'a>(f: &std::collections::HashMap<&str, &'a str>, k: &str) -> Result<&'a str> {
        f.get(k).copied().ok_or(Error::Parse {
            line: 1,
            message: format!("header is missing '{k}'"),
        })
    }
    fn num<T: FromStr>(f: &std::collections::HashMap<&str, &str>, k: &str) -> Result<T> {
        get(f, k)?.parse().map_err(|_| Error::Parse {
            line: 1,
            message: format!("header field '{k}' is not a number"),
        })
    }
    Ok(DatasetMeta {
        env_name: get(&fields, "env_name")?.to_string(),
        num_states: num(&fields, "num_states")?,
        num_actions: num(&fields, "num_actions")?,
        gamma: num(&fields, "gamma")?,
        score_low: num(&fields, "score_low")?,
        score_high: num(&fields, "score_high")?,
        curation: get(&fields, "curation")?.to_string(),
    })
}

fn parse_record(line: &str, lineno: usize) -> Result<TransitionRecord> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    let err = |message: &str| Error::Parse {
        line: lineno,
        message: message.to_string(),
    };
    if parts.len() != 8 {
        return Err(err("expected 8 fields"));
    }
    let int = |i: usize| parts[i].parse::<usize>().map_err(|_| err("bad integer field"));
    let flag = |i: usize| match parts[i] {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(err("flags must be 0 or 1")),
    };
    Ok(TransitionRecord {
        traj_id: int(0)?,
        t: int(1)?,
        s: int(2)?,
        a: int(3)?,
        r: parts[4].parse().map_err(|_| err("bad reward"))?,
        s_next: int(5)?,
        terminal: flag(6)?,
        timeout: flag(7)?,
    })
}

fn to_records(traj: &[crate::mdp::Step]) -> Vec<TransitionRecord> {
    traj.iter()
        .enumerate()
        .map(|(t, st)| TransitionRecord {
            traj_id: 0,
            t,
            s: st.s,
            a: st.a,
            r: st.r,
            s_next: st.s_next,
            terminal: st.terminal,
            timeout: st.timeout,
        })
        .collect()
}

/// Rolls out `policy` `n_trajectories` times (horizon from the MDP).
pub fn collect(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    n_trajectories: usize,
    seed: u64,
    meta: DatasetMeta,
) -> Result<TransitionDataset> {
    collect_filtered(mdp, policy, n_trajectories, seed, meta, 1, |_| true)
}

/// Like [`collect`] but rejects rollouts failing `accept`, giving up after
/// `max_attempts_factor * n_trajectories` attempts.
pub fn collect_filtered<F>(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    n_trajectories: usize,
    seed: u64,
    meta: DatasetMeta,
    max_attempts_factor: usize,
    mut accept: F,
) -> Result<TransitionDataset>
where
    F: FnMut(&[TransitionRecord]) -> bool,
{
    if n_trajectories == 0 {
        return Err(Error::config("collect needs at least one trajectory"));
    }
    if meta.num_states != mdp.num_states() || meta.num_actions != mdp.num_actions() {
        return Err(Error::config("dataset meta does not match the MDP"));
    }
    let mut rng = seeded_rng(seed);
    let mut trajectories = Vec::with_capacity(n_trajectories);
    let max_attempts = max_attempts_factor.max(1) * n_trajectories;
    let mut attempts = 0;
    while trajectories.len() < n_trajectories {
        if attempts == max_attempts {
            return Err(Error::config(format!(
                "only {} of {} trajectories accepted after {} attempts",
                trajectories.len(),
                n_trajectories,
                attempts
            )));
        }
        attempts += 1;
        let traj = to_records(&rollout(mdp, policy, &mut rng, mdp.horizon())?);
        if accept(&traj) {
            trajectories.push(traj);
        }
    }
    TransitionDataset::from_trajectories(trajectories, meta)
}

/// Curation mode for [`mix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    Full,
    Diverse,
    Small,
}

impl FromStr for MixMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MixMode::Full),
            "diverse" => Ok(MixMode::Diverse),
            "small" => Ok(MixMode::Small),
            other => Err(Error::config(format!("unknown mix mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for MixMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MixMode::Full => "full",
            MixMode::Diverse => "diverse",
            MixMode::Small => "small",
        })
    }
}

pub const SEGMENT_MIN_LEN: usize = 10;
pub const SEGMENT_MAX_LEN: usize = 50;

/// Mixes trajectories from a low- and a high-return dataset.
///
/// The output holds as many trajectories as `low`; a fraction `sigma` of
/// them (rounded) is drawn from `high`, the rest from `low`, both without
/// replacement. `Diverse` replaces every drawn trajectory by one random
/// contiguous segment of 10 to 50 steps; `Small` keeps whole trajectories
/// but stops adding them once `budget` transitions would be exceeded.
pub fn mix(
    low: &TransitionDataset,
    high: &TransitionDataset,
    sigma: f64,
    mode: MixMode,
    budget: Option<usize>,
    seed: u64,
) -> Result<TransitionDataset> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::config(format!("sigma must lie in (0, 1), got {sigma}")));
    }
    if !low.meta.same_env(&high.meta) {
        return Err(Error::config("datasets come from different environments"));
    }
    let total = low.num_trajectories();
    let n_high = (sigma * total as f64).round() as usize;
    let n_low = total - n_high;
    if n_high == 0 || n_high > high.num_trajectories() {
        return Err(Error::config(format!(
            "sigma={sigma} needs {n_high} high trajectories but {} are available",
            high.num_trajectories()
        )));
    }
    let mut rng = seeded_rng(seed);
    let mut low_idx: Vec<usize> = (0..low.num_trajectories()).collect();
    low_idx.shuffle(&mut rng);
    low_idx.truncate(n_low);
    let mut high_idx: Vec<usize> = (0..high.num_trajectories()).collect();
    high_idx.shuffle(&mut rng);
    high_idx.truncate(n_high);

    // Interleave so every prefix keeps the sigma proportion (matters for Small).
    let mut order: Vec<(&TransitionDataset, usize)> = Vec::with_capacity(total);
    let (mut li, mut hi) = (0, 0);
    for k in 0..total {
        let want_high = ((k + 1) as f64 * sigma).round() as usize;
        if hi < n_high && (hi < want_high || li == n_low) {
            order.push((high, high_idx[hi]));
            hi += 1;
        } else {
            order.push((low, low_idx[li]));
            li += 1;
        }
    }

    let mut meta = low.meta.clone();
    meta.curation = format!("{mode}-sigma{sigma}");
    let trajectories: Vec<Vec<TransitionRecord>> = match mode {
        MixMode::Full => order.iter().map(|(ds, i)| ds.trajectory(*i).to_vec()).collect(),
        MixMode::Diverse => order
            .iter()
            .map(|(ds, i)| random_segment(ds.trajectory(*i), &mut rng))
            .collect(),
        MixMode::Small => {
            let budget = budget.ok_or_else(|| Error::config("small mode needs a budget"))?;
            let available: usize = order.iter().map(|(ds, i)| ds.trajectory(*i).len()).sum();
            if budget >= available {
                return Err(Error::config(format!(
                    "budget {budget} does not reduce the {available}-transition mixture"
                )));
            }
            let mut kept = Vec::new();
            let mut used = 0;
            for (ds, i) in &order {
                let traj = ds.trajectory(*i);
                if used + traj.len() > budget {
                    break;
                }
                used += traj.len();
                kept.push(traj.to_vec());
            }
            kept
        }
    };
    TransitionDataset::from_trajectories(trajectories, meta)
}

fn random_segment<R: Rng>(traj: &[TransitionRecord], rng: &mut R) -> Vec<TransitionRecord> {
    let len = rng
        .random_range(SEGMENT_MIN_LEN..=SEGMENT_MAX_LEN)
        .min(traj.len());
    let start = rng.random_range(0..=traj.len() - len);
    let mut seg = traj[start..start + len].to_vec();
    let last = seg.last_mut().expect("segment is non-empty");
    if start + len < traj.len() {
        // Cut before the source ended: truncation, not termination.
        last.terminal = false;
        last.timeout = true;
    }
    seg
}

fn returns_or_err(ds: &TransitionDataset, kind: ReturnKind) -> Result<Vec<f64>> {
    if ds.num_trajectories() == 0 {
        return Err(Error::config("dataset has no trajectories"));
    }
    Ok(ds.returns(kind))
}

/// Return positive-sided variance: mean of `max(G - mean G, 0)^2`.
pub fn rpsv(ds: &TransitionDataset) -> Result<f64> {
    rpsv_with(ds, ReturnKind::Discounted)
}

pub fn rpsv_with(ds: &TransitionDataset, kind: ReturnKind) -> Result<f64> {
    Ok(rpsv_of(&returns_or_err(ds, kind)?))
}

pub fn rpsv_of(returns: &[f64]) -> f64 {
    if returns.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    returns
        .iter()
        .map(|g| (g - mean).max(0.0).powi(2))
        .sum::<f64>()
        / n
}

/// Average trajectory return, the empirical estimate of the behavior
/// policy's return.
pub fn dataset_mean_return(ds: &TransitionDataset) -> Result<f64> {
    let g = returns_or_err(ds, ReturnKind::Discounted)?;
    Ok(g.iter().sum::<f64>() / g.len() as f64)
}

/// Max-min normalization against the anchors in `meta`.
pub fn normalized_return(score: f64, meta: &DatasetMeta) -> Result<f64> {
    normalize_score(score, meta.score_low, meta.score_high)
}

pub fn normalize_score(score: f64, low: f64, high: f64) -> Result<f64> {
    if !(high > low) || !low.is_finite() || !high.is_finite() {
        return Err(Error::config(format!(
            "degenerate normalization anchors ({low}, {high})"
        )));
    }
    Ok((score - low) / (high - low))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` edges over the normalized range [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Histogram of trajectory returns after max-min normalization over the
/// dataset. Equal returns all land in the first bin.
pub fn return_histogram(ds: &TransitionDataset, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::config("histogram needs at least one bin"));
    }
    let returns = returns_or_err(ds, ReturnKind::Discounted)?;
    let lo = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; bins];
    for g in returns {
        let x = if hi > lo { (g - lo) / (hi - lo) } else { 0.0 };
        let bin = ((x * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok(Histogram { edges, counts })
}
