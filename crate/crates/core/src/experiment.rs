//! Four-room experiment building blocks: dataset generators, behavior
//! sources for mixtures, score anchors and the distribution comparison
//! behind the stitching figure.

use std::collections::VecDeque;

use crate::dataset::{collect, collect_filtered, DatasetMeta, TransitionDataset, TransitionRecord};
use crate::error::{Error, Result};
use crate::mdp::{
    build_four_room, policy_return, stationary_distribution, value_iteration, FourRoom, Move, TabularMdp,
    TabularPolicy, ValueSolution,
};
use crate::rng::derive_seed;

pub const FOUR_ROOM_SIZE: usize = 11;
pub const FOUR_ROOM_ENV: &str = "fourroom";
pub const FOUR_ROOM_TRAJECTORIES: usize = 1000;
/// Rejection sampling gives up after this many attempts per trajectory.
pub const MAX_ATTEMPTS_FACTOR: usize = 10;
/// Fraction of random actions in the low-return mixture source.
pub const LOW_SOURCE_NOISE: f64 = 0.3;
/// Fraction of random actions in the high-return mixture source.
pub const HIGH_SOURCE_NOISE: f64 = 0.1;

/// The reference 11x11 deterministic four-room grid.
pub fn four_room() -> Result<FourRoom> {
    build_four_room(FOUR_ROOM_SIZE, FOUR_ROOM_SIZE, 0.0)
}

pub fn optimal(mdp: &TabularMdp) -> Result<ValueSolution> {
    value_iteration(mdp, 1e-12)
}

/// Normalization anchors: the uniform-random policy's return and the
/// optimal return.
pub fn score_anchors(mdp: &TabularMdp) -> Result<(f64, f64)> {
    let low = policy_return(mdp, &TabularPolicy::uniform(mdp.num_states(), mdp.num_actions()))?;
    let high = policy_return(mdp, &optimal(mdp)?.policy)?;
    Ok((low, high))
}

fn four_room_meta(mdp: &TabularMdp, curation: &str) -> Result<DatasetMeta> {
    let (low, high) = score_anchors(mdp)?;
    let mut meta = DatasetMeta::for_mdp(FOUR_ROOM_ENV, mdp);
    meta.score_low = low;
    meta.score_high = high;
    meta.curation = curation.to_string();
    Ok(meta)
}

fn discounted(traj: &[TransitionRecord], gamma: f64) -> f64 {
    traj.iter().rev().fold(0.0, |g, r| r.r + gamma * g)
}

/// Uniform-random rollouts from the start state with every trajectory that
/// attains the optimal return rejected, so no single trajectory in the
/// dataset is optimal.
pub fn suboptimal_dataset(env: &FourRoom, n_trajectories: usize, seed: u64) -> Result<TransitionDataset> {
    let mdp = &env.mdp;
    let v_star = optimal(mdp)?.value(env.start);
    let gamma = mdp.gamma();
    let meta = four_room_meta(mdp, "suboptimal")?;
    let policy = TabularPolicy::uniform(mdp.num_states(), mdp.num_actions());
    let ds = collect_filtered(mdp, &policy, n_trajectories, seed, meta, MAX_ATTEMPTS_FACTOR, |traj| {
        discounted(traj, gamma) < v_star - 1e-12
    })
    .map_err(|e| Error::config(format!("four-room generation failed, check the horizon: {e}")))?;
    if !ds.records().iter().any(|r| r.r > 0.0) {
        return Err(Error::config(
            "no generated trajectory reaches the goal; the horizon is too short for stitching",
        ));
    }
    Ok(ds)
}

/// Deterministic policy moving along a shortest path to `target` (lowest
/// action index among equally short moves). Uses each action's most
/// likely successor.
pub fn toward(env: &FourRoom, target: usize) -> Result<TabularPolicy> {
    let mdp = &env.mdp;
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let main_successor = |s: usize, a: usize| {
        mdp.successors(s, a)
            .iter()
            .fold((s, f64::NEG_INFINITY), |best, &(t, p)| if p > best.1 { (t, p) } else { best })
            .0
    };
    let mut dist = vec![usize::MAX; n];
    dist[target] = 0;
    let mut queue = VecDeque::from([target]);
    while let Some(t) = queue.pop_front() {
        for s in 0..n {
            if dist[s] == usize::MAX && !mdp.is_terminal(s) && (0..na).any(|a| main_successor(s, a) == t) {
                dist[s] = dist[t] + 1;
                queue.push_back(s);
            }
        }
    }
    let actions: Vec<usize> = (0..n)
        .map(|s| {
            (0..na)
                .min_by_key(|&a| (dist[main_successor(s, a)], a))
                .expect("at least one action")
        })
        .collect();
    TabularPolicy::deterministic(na, &actions)
}

/// `(1 - eps) pi + eps uniform`.
pub fn with_noise(policy: &TabularPolicy, eps: f64) -> Result<TabularPolicy> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::config(format!("noise level must lie in [0, 1], got {eps}")));
    }
    let na = policy.num_actions() as f64;
    let probs = policy.probs().iter().map(|p| (1.0 - eps) * p + eps / na).collect();
    TabularPolicy::new(policy.num_states(), policy.num_actions(), probs)
}

/// Low- and high-return sources for mixtures. The low source heads for
/// the bottom-right corner (a dead end far from the goal) with some random
/// actions; the high source follows the optimal policy with a little noise.
pub fn mixture_sources(env: &FourRoom, n_trajectories: usize, seed: u64) -> Result<(TransitionDataset, TransitionDataset)> {
    let mdp = &env.mdp;
    let decoy = env
        .state_at(env.height - 1, env.width - 1)
        .ok_or_else(|| Error::config("four-room layout has no bottom-right cell"))?;
    let low_policy = with_noise(&toward(env, decoy)?, LOW_SOURCE_NOISE)?;
    let high_policy = with_noise(&optimal(mdp)?.policy, HIGH_SOURCE_NOISE)?;
    let low = collect(mdp, &low_policy, n_trajectories, derive_seed(seed, 1), four_room_meta(mdp, "low")?)?;
    let high = collect(mdp, &high_policy, n_trajectories, derive_seed(seed, 2), four_room_meta(mdp, "high")?)?;
    Ok((low, high))
}

/// Total-variation distance between two non-negative tables, each
/// normalized to unit mass first.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::config("distributions have different sizes"));
    }
    let zp: f64 = p.iter().sum();
    let zq: f64 = q.iter().sum();
    if !(zp > 0.0 && zq > 0.0) {
        return Err(Error::config("distribution has no mass"));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a / zp - b / zq).abs()).sum::<f64>())
}

/// One column of the stitching figure: a normalized `(s,a)` distribution
/// and its expected per-step reward.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionColumn {
    pub name: String,
    pub d: Vec<f64>,
    pub j: f64,
}

impl DistributionColumn {
    pub fn new(name: impl Into<String>, mass: &[f64], mdp: &TabularMdp) -> Result<Self> {
        let total: f64 = mass.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::config("distribution has no mass"));
        }
        let d: Vec<f64> = mass.iter().map(|m| m / total).collect();
        let j = d.iter().zip(mdp.reward_table()).map(|(p, r)| p * r).sum();
        Ok(Self {
            name: name.into(),
            d,
            j,
        })
    }
}

/// Undiscounted stationary `(s,a)` distribution of the optimal policy with
/// restarts at the start state, restricted to non-terminal states (a
/// dataset never holds records at a terminal state).
pub fn optimal_column(mdp: &TabularMdp) -> Result<DistributionColumn> {
    let policy = optimal(mdp)?.policy;
    let d = stationary_distribution(mdp, &policy, 1.0)?;
    let na = mdp.num_actions();
    let mass: Vec<f64> = d
        .probs()
        .iter()
        .enumerate()
        .map(|(idx, &p)| if mdp.is_terminal(idx / na) { 0.0 } else { p })
        .collect();
    DistributionColumn::new("optimal", &mass, mdp)
}

/// Dataset frequency times a per-(s,a) weight table.
pub fn weighted_column(name: &str, ds: &TransitionDataset, sa_weights: &[f64], mdp: &TabularMdp) -> Result<DistributionColumn> {
    let mass: Vec<f64> = ds.sa_counts().iter().zip(sa_weights).map(|(c, w)| c * w).collect();
    DistributionColumn::new(name, &mass, mdp)
}

/// Writes columns side by side as `s,a,<name>...` plus a final `J` row.
pub fn write_columns<W: std::io::Write>(mut out: W, columns: &[DistributionColumn], num_actions: usize) -> Result<()> {
    let names: Vec<&str> = columns.iter().map(|c| c.name.as_str()).collect();
    writeln!(out, "s,a,{}", names.join(","))?;
    let n = columns.first().map_or(0, |c| c.d.len());
    for idx in 0..n {
        let vals: Vec<String> = columns.iter().map(|c| c.d[idx].to_string()).collect();
        writeln!(out, "{},{},{}", idx / num_actions, idx % num_actions, vals.join(","))?;
    }
    let js: Vec<String> = columns.iter().map(|c| c.j.to_string()).collect();
    writeln!(out, "J,J,{}", js.join(","))?;
    Ok(())
}

/// Moves in index order, for rendering policies.
pub fn move_symbol(a: usize) -> char {
    match Move::ALL.get(a) {
        Some(Move::Up) => '^',
        Some(Move::Down) => 'v',
        Some(Move::Left) => '<',
        Some(Move::Right) => '>',
        None => '?',
    }
}

/// ASCII arrows of a policy's modes over the grid.
pub fn render_policy(env: &FourRoom, policy: &TabularPolicy) -> String {
    let mut grid = vec![vec!['#'; env.width]; env.height];
    for (s, &(r, c)) in env.cells.iter().enumerate() {
        grid[r][c] = if s == env.goal { 'G' } else { move_symbol(policy.mode(s)) };
    }
    grid.into_iter()
        .map(|row| row.into_iter().collect::<String>() + "\n")
        .collect()
}
