//! Finite MDPs, the four-room gridworld, rollouts and exact solvers.
//!
//! The solvers here (value iteration, exact policy evaluation and the
//! stationary-distribution solve) are the ground truth that the learned
//! components are checked against.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::seeded_rng;

const ROW_SUM_TOL: f64 = 1e-12;

/// A finite MDP with sparse transition rows.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// Row `s * num_actions + a` lists `(s', T(s'|s,a))` with positive mass.
    transitions: Vec<Vec<(usize, f64)>>,
    reward: Vec<f64>,
    initial_dist: Vec<f64>,
    initial_support: Vec<(usize, f64)>,
    terminal: Vec<bool>,
    gamma: f64,
    horizon: usize,
}

impl TabularMdp {
    /// Builds an MDP from a dense `[s][a][s']` transition tensor.
    #[allow(clippy::too_many_arguments)]
    pub fn from_dense(
        num_states: usize,
        num_actions: usize,
        transition: &[f64],
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        if transition.len() != num_states * num_actions * num_states {
            return Err(Error::config("transition tensor has wrong size"));
        }
        let rows = transition
            .chunks(num_states)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(s, &p)| (s, p))
                    .collect()
            })
            .collect();
        Self::from_sparse(
            num_states,
            num_actions,
            rows,
            reward,
            initial_dist,
            terminal,
            gamma,
            horizon,
        )
    }

    /// Builds an MDP from sparse transition rows indexed by `s * num_actions + a`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_sparse(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<Vec<(usize, f64)>>,
        reward: Vec<f64>,
        initial_dist: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::config("MDP needs at least one state and one action"));
        }
        let n_sa = num_states * num_actions;
        if transitions.len() != n_sa || reward.len() != n_sa {
            return Err(Error::config("transition/reward tables have wrong size"));
        }
        if initial_dist.len() != num_states || terminal.len() != num_states {
            return Err(Error::config("initial distribution/terminal mask have wrong size"));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        if horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        for (idx, row) in transitions.iter().enumerate() {
            let mut total = 0.0;
            for &(next, p) in row {
                if next >= num_states || !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(format!("invalid transition entry in row {idx}")));
                }
                total += p;
            }
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::config(format!(
                    "transition row {idx} sums to {total}, not 1"
                )));
            }
            let s = idx / num_actions;
            if terminal[s] && !row.iter().all(|&(next, p)| next == s || p == 0.0) {
                return Err(Error::config(format!("terminal state {s} is not absorbing")));
            }
        }
        if !reward.iter().all(|r| r.is_finite()) {
            return Err(Error::config("reward table must be finite"));
        }
        check_probability_vector(&initial_dist, "initial distribution")?;
        if initial_dist
            .iter()
            .zip(&terminal)
            .any(|(&p, &term)| term && p > 0.0)
        {
            return Err(Error::config("initial distribution puts mass on a terminal state"));
        }
        let initial_support = initial_dist
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, &p)| (s, p))
            .collect();
        Ok(Self {
            num_states,
            num_actions,
            transitions,
            reward,
            initial_dist,
            initial_support,
            terminal,
            gamma,
            horizon,
        })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_state_actions(&self) -> usize {
        self.num_states * self.num_actions
    }

    #[inline]
    pub fn sa(&self, s: usize, a: usize) -> usize {
        s * self.num_actions + a
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn with_horizon(mut self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::config(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        self.gamma = gamma;
        Ok(self)
    }

    #[inline]
    pub fn successors(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[self.sa(s, a)]
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.successors(s, a)
            .iter()
            .filter(|&&(n, _)| n == next)
            .map(|&(_, p)| p)
            .sum()
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[self.sa(s, a)]
    }

    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    #[inline]
    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_sparse(&self.initial_support, rng)
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        sample_sparse(self.successors(s, a), rng)
    }

    /// Largest |r(s,a)| over the table.
    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }
}

fn check_probability_vector(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::config(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::config(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

fn sample_sparse<R: Rng + ?Sized>(row: &[(usize, f64)], rng: &mut R) -> usize {
    if row.len() == 1 {
        return row[0].0;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(s, p) in row {
        acc += p;
        if u < acc {
            return s;
        }
    }
    row[row.len() - 1].0
}

/// A stochastic policy `pi(a|s)` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    num_states: usize,
    num_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_states * num_actions {
            return Err(Error::config("policy table has wrong size"));
        }
        for (s, row) in probs.chunks(num_actions).enumerate() {
            check_probability_vector(row, &format!("policy row {s}"))?;
        }
        Ok(Self {
            num_states,
            num_actions,
            probs,
        })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self {
            num_states,
            num_actions,
            probs: vec![1.0 / num_actions as f64; num_states * num_actions],
        }
    }

    pub fn deterministic(num_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * num_actions];
        for (s, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::config(format!("action {a} out of range at state {s}")));
            }
            probs[s * num_actions + a] = 1.0;
        }
        Ok(Self {
            num_states: actions.len(),
            num_actions,
            probs,
        })
    }

    /// Greedy policy over a state-action table. Ties within `tie_tol` go to
    /// the lowest action index.
    pub fn greedy(table: &[f64], num_actions: usize, tie_tol: f64) -> Self {
        let actions: Vec<usize> = table
            .chunks(num_actions)
            .map(|row| argmax_lowest(row, tie_tol))
            .collect();
        Self::deterministic(num_actions, &actions).expect("argmax is in range")
    }

    /// Normalizes non-negative per-(s,a) scores into a policy; rows with no
    /// mass fall back to uniform.
    pub fn from_scores(scores: &[f64], num_actions: usize) -> Self {
        let num_states = scores.len() / num_actions;
        let mut probs = Vec::with_capacity(scores.len());
        for row in scores.chunks(num_actions) {
            let total: f64 = row.iter().sum();
            if total > 0.0 && total.is_finite() {
                probs.extend(row.iter().map(|x| x / total));
            } else {
                probs.extend(std::iter::repeat(1.0 / num_actions as f64).take(num_actions));
            }
        }
        Self {
            num_states,
            num_actions,
            probs,
        }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.num_actions + a]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_actions..(s + 1) * self.num_actions]
    }

    /// Most probable action, lowest index on ties.
    pub fn mode(&self, s: usize) -> usize {
        argmax_lowest(self.row(s), 0.0)
    }

    /// Deterministic policy picking `mode(s)` everywhere.
    pub fn to_greedy(&self) -> Self {
        Self::greedy(&self.probs, self.num_actions, 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let row = self.row(s);
        if let Some(a) = row.iter().position(|&p| p == 1.0) {
            return a;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Index of the maximum; anything within `tie_tol` of the running best
/// keeps the earlier index.
pub fn argmax_lowest(row: &[f64], tie_tol: f64) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] + tie_tol {
            best = i;
        }
    }
    best
}

/// One environment step as emitted by [`rollout`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub terminal: bool,
    pub timeout: bool,
}

pub type Trajectory = Vec<Step>;

/// Samples one episode from `rho0`, `pi` and `T`, stopping at a terminal
/// state or after `max_steps` transitions (timeout flag on the last step).
pub fn rollout<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    rng: &mut R,
    max_steps: usize,
) -> Result<Trajectory> {
    if max_steps == 0 {
        return Err(Error::config("rollout needs max_steps >= 1"));
    }
    let mut s = mdp.sample_initial(rng);
    let mut steps = Vec::new();
    for t in 0..max_steps {
        let a = policy.sample(s, rng);
        let s_next = mdp.sample_next(s, a, rng);
        let terminal = mdp.is_terminal(s_next);
        let timeout = !terminal && t + 1 == max_steps;
        steps.push(Step {
            s,
            a,
            r: mdp.reward(s, a),
            s_next,
            terminal,
            timeout,
        });
        if terminal {
            break;
        }
        s = s_next;
    }
    Ok(steps)
}

pub fn rollout_seeded(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    seed: u64,
    max_steps: usize,
) -> Result<Trajectory> {
    rollout(mdp, policy, &mut seeded_rng(seed), max_steps)
}

pub fn discounted_return(traj: &[Step], gamma: f64) -> f64 {
    let mut g = 0.0;
    let mut discount = 1.0;
    for step in traj {
        g += discount * step.r;
        discount *= gamma;
    }
    g
}

/// Mean discounted return over `episodes` rollouts capped at the MDP horizon.
pub fn evaluate_policy<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    episodes: usize,
    rng: &mut R,
) -> f64 {
    let mut total = 0.0;
    for _ in 0..episodes {
        let traj = rollout(mdp, policy, rng, mdp.horizon()).expect("horizon >= 1");
        total += discounted_return(&traj, mdp.gamma());
    }
    total / episodes as f64
}

/// Output of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct ValueSolution {
    pub q: Vec<f64>,
    pub policy: TabularPolicy,
    pub iterations: usize,
    pub residual: f64,
}

impl ValueSolution {
    pub fn value(&self, s: usize) -> f64 {
        let a = self.policy.mode(s);
        self.q[s * self.policy.num_actions() + a]
    }
}

const VI_MAX_ITERS: usize = 200_000;

fn bellman_backup(mdp: &TabularMdp, q: &[f64], out: &mut [f64]) {
    let na = mdp.num_actions();
    let v: Vec<f64> = (0..mdp.num_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                0.0
            } else {
                q[s * na..(s + 1) * na]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, &x| m.max(x))
            }
        })
        .collect();
    for s in 0..mdp.num_states() {
        for a in 0..na {
            let idx = s * na + a;
            out[idx] = if mdp.is_terminal(s) {
                0.0
            } else {
                mdp.reward(s, a)
                    + mdp.gamma()
                        * mdp
                            .successors(s, a)
                            .iter()
                            .map(|&(n, p)| p * v[n])
                            .sum::<f64>()
            };
        }
    }
}

/// Max-norm distance between `q` and its optimal Bellman backup.
pub fn bellman_residual(mdp: &TabularMdp, q: &[f64]) -> f64 {
    let mut next = vec![0.0; q.len()];
    bellman_backup(mdp, q, &mut next);
    max_abs_diff(q, &next)
}

/// Value iteration to `tol` in max norm; greedy policy ties within 1e-12
/// go to the lowest action.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<ValueSolution> {
    let mut q = vec![0.0; mdp.num_state_actions()];
    let mut next = q.clone();
    let mut residual = f64::INFINITY;
    for iter in 1..=VI_MAX_ITERS {
        bellman_backup(mdp, &q, &mut next);
        residual = max_abs_diff(&q, &next);
        std::mem::swap(&mut q, &mut next);
        if residual <= tol {
            let residual = bellman_residual(mdp, &q);
            let policy = TabularPolicy::greedy(&q, mdp.num_actions(), 1e-12);
            return Ok(ValueSolution {
                q,
                policy,
                iterations: iter,
                residual,
            });
        }
    }
    Err(Error::numerical(
        "value iteration did not converge",
        residual,
    ))
}

/// Exact discounted state values of `policy` (terminal states have value 0).
pub fn policy_evaluation(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>> {
    let n = mdp.num_states();
    let gamma = mdp.gamma();
    let mut a_mat = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    for s in 0..n {
        if mdp.is_terminal(s) {
            continue;
        }
        for a in 0..mdp.num_actions() {
            let p = policy.prob(s, a);
            if p == 0.0 {
                continue;
            }
            b[s] += p * mdp.reward(s, a);
            for &(next, t) in mdp.successors(s, a) {
                if !mdp.is_terminal(next) {
                    a_mat[(s, next)] -= gamma * p * t;
                }
            }
        }
    }
    let v = a_mat
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::numerical("policy evaluation system is singular", f64::NAN))?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("policy evaluation produced non-finite values", f64::NAN));
    }
    Ok(v.iter().copied().collect())
}

/// Exact discounted return of `policy` from the initial distribution.
pub fn policy_return(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64> {
    let v = policy_evaluation(mdp, policy)?;
    Ok(mdp
        .initial_dist()
        .iter()
        .zip(&v)
        .map(|(p, v)| p * v)
        .sum())
}

/// A normalized occupancy over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    num_states: usize,
    num_actions: usize,
    d: Vec<f64>,
}

impl StationaryDistribution {
    pub fn new(num_states: usize, num_actions: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != num_states * num_actions {
            return Err(Error::config("distribution has wrong size"));
        }
        if d.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::config("distribution has negative entries"));
        }
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::config(format!("distribution sums to {total}")));
        }
        Ok(Self {
            num_states,
            num_actions,
            d,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.d
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.d[s * self.num_actions + a]
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn state_marginal(&self) -> Vec<f64> {
        self.d
            .chunks(self.num_actions)
            .map(|row| row.iter().sum())
            .collect()
    }
}

/// State-to-state kernel under `policy`; with `restart`, terminal rows jump
/// to the initial distribution.
fn state_kernel(mdp: &TabularMdp, policy: &TabularPolicy, restart: bool) -> Vec<Vec<(usize, f64)>> {
    (0..mdp.num_states())
        .map(|s| {
            let mut row: Vec<(usize, f64)> = Vec::new();
            if restart && mdp.is_terminal(s) {
                row.extend(mdp.initial_support.iter().copied());
                return row;
            }
            for a in 0..mdp.num_actions() {
                let pa = policy.prob(s, a);
                if pa == 0.0 {
                    continue;
                }
                for &(next, p) in mdp.successors(s, a) {
                    match row.iter_mut().find(|(n, _)| *n == next) {
                        Some(entry) => entry.1 += pa * p,
                        None => row.push((next, pa * p)),
                    }
                }
            }
            row
        })
        .collect()
}

/// Solves the Bellman flow equations for the occupancy of `policy`.
///
/// For `gamma < 1` this is the normalized discounted occupancy from `rho0`.
/// For `gamma == 1` terminal states are rewired to restart from `rho0` and
/// the stationary distribution of the resulting chain is returned.
pub fn stationary_distribution(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    gamma: f64,
) -> Result<StationaryDistribution> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if policy.num_states() != mdp.num_states() || policy.num_actions() != mdp.num_actions() {
        return Err(Error::config("policy shape does not match the MDP"));
    }
    let undiscounted = gamma == 1.0;
    let kernel = state_kernel(mdp, policy, undiscounted);

    // Only states reachable from rho0 can carry mass.
    let n = mdp.num_states();
    let mut index = vec![usize::MAX; n];
    let mut reachable = Vec::new();
    let mut stack: Vec<usize> = mdp.initial_support.iter().map(|&(s, _)| s).collect();
    while let Some(s) = stack.pop() {
        if index[s] != usize::MAX {
            continue;
        }
        index[s] = reachable.len();
        reachable.push(s);
        for &(next, p) in &kernel[s] {
            if p > 0.0 && index[next] == usize::MAX {
                stack.push(next);
            }
        }
    }
    let m = reachable.len();

    // x(s') - gamma * sum_s P(s'|s) x(s) = (1 - gamma) rho0(s')
    let mut a_mat = DMatrix::<f64>::identity(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for (i, &s) in reachable.iter().enumerate() {
        for &(next, p) in &kernel[s] {
            let j = index[next];
            a_mat[(j, i)] -= gamma * p;
        }
        b[i] = (1.0 - gamma) * mdp.initial_dist()[s];
    }
    if undiscounted {
        // The balance equations are rank deficient; swap one for unit mass.
        for i in 0..m {
            a_mat[(0, i)] = 1.0;
        }
        b[0] = 1.0;
    }
    let x = a_mat
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::numerical("flow system is singular", f64::NAN))?;

    let mut state_mass = vec![0.0; n];
    for (i, &s) in reachable.iter().enumerate() {
        let v = x[i];
        if !v.is_finite() || v < -1e-10 {
            return Err(Error::numerical(
                "flow solution has negative or non-finite mass",
                v,
            ));
        }
        state_mass[s] = v.max(0.0);
    }
    let total: f64 = state_mass.iter().sum();
    let mut d = vec![0.0; mdp.num_state_actions()];
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            d[s * mdp.num_actions() + a] = state_mass[s] / total * policy.prob(s, a);
        }
    }
    let dist = StationaryDistribution::new(n, mdp.num_actions(), d)?;
    let residual = flow_residual(mdp, &dist, gamma);
    if residual >= 1e-9 {
        return Err(Error::numerical("flow residual too large", residual));
    }
    Ok(dist)
}

/// Max violation of the Bellman flow equations by `d` (restart-rewired
/// when `gamma == 1`).
pub fn flow_residual(mdp: &TabularMdp, d: &StationaryDistribution, gamma: f64) -> f64 {
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let marginal = d.state_marginal();
    let mut inflow: Vec<f64> = mdp
        .initial_dist()
        .iter()
        .map(|p| (1.0 - gamma) * p)
        .collect();
    for s in 0..n {
        if gamma == 1.0 && mdp.is_terminal(s) {
            for &(s0, p) in &mdp.initial_support {
                inflow[s0] += marginal[s] * p;
            }
            continue;
        }
        for a in 0..na {
            let mass = d.get(s, a);
            if mass == 0.0 {
                continue;
            }
            for &(next, p) in mdp.successors(s, a) {
                inflow[next] += gamma * p * mass;
            }
        }
    }
    max_abs_diff(&marginal, &inflow)
}

/// Sum over (s,a) of `d(s,a) r(s,a)`.
pub fn expected_return(mdp: &TabularMdp, d: &StationaryDistribution) -> f64 {
    d.probs()
        .iter()
        .zip(mdp.reward_table())
        .map(|(p, r)| p * r)
        .sum()
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Grid actions in index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Down, Move::Left, Move::Right];

    fn delta(self) -> (isize, isize) {
        match self {
            Move::Up => (-1, 0),
            Move::Down => (1, 0),
            Move::Left => (0, -1),
            Move::Right => (0, 1),
        }
    }
}

pub const FOUR_ROOM_GAMMA: f64 = 0.99;
pub const FOUR_ROOM_HORIZON: usize = 300;

/// The four-room gridworld together with its layout.
#[derive(Debug, Clone)]
pub struct FourRoom {
    pub mdp: TabularMdp,
    pub width: usize,
    pub height: usize,
    /// `(row, col)` of every state, row 0 at the top.
    pub cells: Vec<(usize, usize)>,
    pub start: usize,
    pub goal: usize,
}

impl FourRoom {
    pub fn state_at(&self, row: usize, col: usize) -> Option<usize> {
        self.cells.iter().position(|&c| c == (row, col))
    }

    /// ASCII layout: `#` wall, `S` start, `G` goal, `.` free.
    pub fn render(&self) -> String {
        let mut grid = vec![vec!['#'; self.width]; self.height];
        for (s, &(r, c)) in self.cells.iter().enumerate() {
            grid[r][c] = if s == self.start {
                'S'
            } else if s == self.goal {
                'G'
            } else {
                '.'
            };
        }
        grid.into_iter()
            .map(|row| row.into_iter().collect::<String>() + "\n")
            .collect()
    }

    /// Length of the shortest start-to-goal path, by breadth-first search
    /// over deterministic moves.
    pub fn shortest_path_len(&self) -> Option<usize> {
        let mut dist = vec![usize::MAX; self.cells.len()];
        let mut queue = std::collections::VecDeque::from([self.start]);
        dist[self.start] = 0;
        while let Some(s) = queue.pop_front() {
            if s == self.goal {
                return Some(dist[s]);
            }
            for mv in Move::ALL {
                if let Some(n) = self.neighbor(s, mv) {
                    if dist[n] == usize::MAX {
                        dist[n] = dist[s] + 1;
                        queue.push_back(n);
                    }
                }
            }
        }
        None
    }

    fn neighbor(&self, s: usize, mv: Move) -> Option<usize> {
        let (r, c) = self.cells[s];
        let (dr, dc) = mv.delta();
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        self.state_at(nr, nc)
    }
}

/// Four rooms split by one vertical and one horizontal wall, each wall half
/// pierced by a single doorway. The start is the bottom-left corner, the
/// goal the top-right corner; entering the goal pays +1 and terminates.
pub fn build_four_room(width: usize, height: usize, slip: f64) -> Result<FourRoom> {
    if width < 7 || height < 7 || width % 2 == 0 || height % 2 == 0 {
        return Err(Error::config(format!(
            "four-room grid must be odd and at least 7x7, got {width}x{height}"
        )));
    }
    if !(0.0..0.5).contains(&slip) {
        return Err(Error::config(format!("slip must lie in [0, 0.5), got {slip}")));
    }
    let wall_col = width / 2;
    let wall_row = height / 2;
    let half_w = wall_col;
    let half_h = wall_row;
    let doors_in_col = [half_h / 2, wall_row + 1 + half_h / 2];
    let doors_in_row = [half_w / 2, wall_col + 1 + half_w / 2];
    let is_wall = |r: usize, c: usize| {
        (c == wall_col && !doors_in_col.contains(&r)) || (r == wall_row && !doors_in_row.contains(&c))
    };

    let mut cells = Vec::new();
    let mut lookup = vec![vec![usize::MAX; width]; height];
    for (r, row) in lookup.iter_mut().enumerate() {
        for (c, slot) in row.iter_mut().enumerate() {
            if !is_wall(r, c) {
                *slot = cells.len();
                cells.push((r, c));
            }
        }
    }
    let start = lookup[height - 1][0];
    let goal = lookup[0][width - 1];
    let n = cells.len();
    let na = Move::ALL.len();

    let step = |s: usize, mv: Move| -> usize {
        let (r, c) = cells[s];
        let (dr, dc) = mv.delta();
        match (r.checked_add_signed(dr), c.checked_add_signed(dc)) {
            (Some(nr), Some(nc)) if nr < height && nc < width && lookup[nr][nc] != usize::MAX => {
                lookup[nr][nc]
            }
            _ => s,
        }
    };

    let mut transitions = Vec::with_capacity(n * na);
    let mut reward = vec![0.0; n * na];
    for s in 0..n {
        for (a, &mv) in Move::ALL.iter().enumerate() {
            let mut row: Vec<(usize, f64)> = Vec::new();
            if s == goal {
                row.push((s, 1.0));
            } else {
                for &actual in &Move::ALL {
                    let p = if actual == mv { 1.0 - slip } else { slip / 3.0 };
                    if p == 0.0 {
                        continue;
                    }
                    let next = step(s, actual);
                    match row.iter_mut().find(|(x, _)| *x == next) {
                        Some(entry) => entry.1 += p,
                        None => row.push((next, p)),
                    }
                }
                reward[s * na + a] = row
                    .iter()
                    .filter(|(x, _)| *x == goal)
                    .map(|&(_, p)| p)
                    .sum();
            }
            transitions.push(row);
        }
    }
    // Exact unit rows keep the sum check at machine precision.
    for row in &mut transitions {
        let total: f64 = row.iter().map(|(_, p)| p).sum();
        for entry in row.iter_mut() {
            entry.1 /= total;
        }
    }
    let mut initial = vec![0.0; n];
    initial[start] = 1.0;
    let mut terminal = vec![false; n];
    terminal[goal] = true;
    let mdp = TabularMdp::from_sparse(
        n,
        na,
        transitions,
        reward,
        initial,
        terminal,
        FOUR_ROOM_GAMMA,
        FOUR_ROOM_HORIZON,
    )?;
    Ok(FourRoom {
        mdp,
        width,
        height,
        cells,
        start,
        goal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn self_loop() -> TabularMdp {
        TabularMdp::from_dense(1, 1, &[1.0], vec![0.5], vec![1.0], vec![false], 0.9, 10).unwrap()
    }

    fn two_cycle() -> TabularMdp {
        // state 0 -> 1 -> 0, one action
        TabularMdp::from_dense(
            2,
            1,
            &[0.0, 1.0, 1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.5, 0.5],
            vec![false, false],
            1.0,
            10,
        )
        .unwrap()
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let err = TabularMdp::from_dense(1, 1, &[0.9], vec![0.0], vec![1.0], vec![false], 0.9, 1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn rejects_initial_mass_on_terminal() {
        let err = TabularMdp::from_dense(1, 1, &[1.0], vec![0.0], vec![1.0], vec![true], 0.9, 1);
        assert!(err.is_err());
    }

    #[test]
    fn four_room_reference_layout() {
        let env = build_four_room(11, 11, 0.0).unwrap();
        assert_eq!(env.mdp.num_states(), 104);
        assert_eq!(env.mdp.num_actions(), 4);
        assert_eq!(env.mdp.terminal_mask().iter().filter(|&&t| t).count(), 1);
        assert_eq!(env.shortest_path_len(), Some(20));
    }

    #[test]
    fn four_room_rejects_bad_dimensions() {
        assert!(build_four_room(6, 11, 0.0).is_err());
        assert!(build_four_room(12, 11, 0.0).is_err());
        assert!(build_four_room(11, 11, 0.5).is_err());
    }

    #[test]
    fn four_room_deterministic_without_slip() {
        let env = build_four_room(11, 11, 0.0).unwrap();
        let mdp = &env.mdp;
        for s in 0..mdp.num_states() {
            for a in 0..4 {
                let row = mdp.successors(s, a);
                assert_eq!(row.len(), 1);
                assert_eq!(row[0].1, 1.0);
                let expected = if !mdp.is_terminal(s) && row[0].0 == env.goal { 1.0 } else { 0.0 };
                assert_eq!(mdp.reward(s, a), expected);
            }
        }
    }

    #[test]
    fn four_room_slip_rows_are_stochastic() {
        let env = build_four_room(9, 7, 0.2).unwrap();
        for idx in 0..env.mdp.num_state_actions() {
            let total: f64 = env.mdp.transitions[idx].iter().map(|x| x.1).sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rollout_stops_after_one_step() {
        let env = build_four_room(11, 11, 0.0).unwrap();
        let pi = TabularPolicy::uniform(104, 4);
        let traj = rollout_seeded(&env.mdp, &pi, 3, 1).unwrap();
        assert_eq!(traj.len(), 1);
        assert!(traj[0].timeout);
        assert!(rollout_seeded(&env.mdp, &pi, 3, 0).is_err());
    }

    #[test]
    fn rollout_is_seeded() {
        let env = build_four_room(11, 11, 0.1).unwrap();
        let pi = TabularPolicy::uniform(104, 4);
        let a = rollout_seeded(&env.mdp, &pi, 17, 100).unwrap();
        let b = rollout_seeded(&env.mdp, &pi, 17, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn optimal_rollout_follows_shortest_path() {
        let env = build_four_room(11, 11, 0.0).unwrap();
        let sol = value_iteration(&env.mdp, 1e-10).unwrap();
        let traj = rollout_seeded(&env.mdp, &sol.policy, 0, 100).unwrap();
        assert_eq!(traj.len(), env.shortest_path_len().unwrap());
        assert_eq!(traj.last().unwrap().r, 1.0);
        assert!(traj.last().unwrap().terminal);
    }

    #[test]
    fn value_iteration_closed_form() {
        let env = build_four_room(11, 11, 0.0).unwrap();
        let sol = value_iteration(&env.mdp, 1e-10).unwrap();
        let len = env.shortest_path_len().unwrap() as i32;
        let expected = 0.99_f64.powi(len - 1);
        assert!((sol.value(env.start) - expected).abs() < 1e-9);
        assert!(sol.residual <= 1e-10);
        assert!(bellman_residual(&env.mdp, &sol.q) <= 1e-10);
    }

    #[test]
    fn value_iteration_zero_reward() {
        let mdp = TabularMdp::from_dense(
            2,
            2,
            &[0.5, 0.5, 1.0, 0.0, 0.0, 1.0, 0.3, 0.7],
            vec![0.0; 4],
            vec![1.0, 0.0],
            vec![false, false],
            0.9,
            10,
        )
        .unwrap();
        let sol = value_iteration(&mdp, 1e-12).unwrap();
        assert!(sol.q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn greedy_policy_is_a_fixed_point() {
        let env = build_four_room(11, 11, 0.1).unwrap();
        let sol = value_iteration(&env.mdp, 1e-12).unwrap();
        let mut backed = vec![0.0; sol.q.len()];
        bellman_backup(&env.mdp, &sol.q, &mut backed);
        let again = TabularPolicy::greedy(&backed, 4, 1e-12);
        for s in 0..env.mdp.num_states() {
            if env.mdp.is_terminal(s) {
                continue;
            }
            let a = sol.policy.mode(s);
            let best = backed[s * 4..s * 4 + 4].iter().cloned().fold(f64::MIN, f64::max);
            assert!(backed[s * 4 + a] >= best - 1e-9, "state {s}");
            assert_eq!(again.mode(s), a);
        }
    }

    #[test]
    fn stationary_single_state() {
        let mdp = self_loop();
        let pi = TabularPolicy::uniform(1, 1);
        for gamma in [0.5, 0.99, 1.0] {
            let d = stationary_distribution(&mdp, &pi, gamma).unwrap();
            assert!((d.get(0, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stationary_two_cycle_is_uniform() {
        let mdp = two_cycle();
        let pi = TabularPolicy::uniform(2, 1);
        let d = stationary_distribution(&mdp, &pi, 1.0).unwrap();
        assert!((d.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((d.get(1, 0) - 0.5).abs() < 1e-12);
        assert!(flow_residual(&mdp, &d, 1.0) < 1e-9);
    }

    #[test]
    fn stationary_four_room_residuals() {
        let env = build_four_room(11, 11, 0.1).unwrap();
        let pi = TabularPolicy::uniform(104, 4);
        for gamma in [0.9, 0.99, 1.0] {
            let d = stationary_distribution(&env.mdp, &pi, gamma).unwrap();
            assert!(d.probs().iter().all(|&x| x >= 0.0));
            assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(flow_residual(&env.mdp, &d, gamma) < 1e-9);
        }
    }

    #[test]
    fn expected_return_basics() {
        let mdp = two_cycle();
        let concentrated = StationaryDistribution::new(2, 1, vec![1.0, 0.0]).unwrap();
        assert_eq!(expected_return(&mdp, &concentrated), 0.0);

        let c = 0.7;
        let flat = TabularMdp::from_dense(
            2,
            1,
            &[0.0, 1.0, 1.0, 0.0],
            vec![c, c],
            vec![0.5, 0.5],
            vec![false, false],
            1.0,
            10,
        )
        .unwrap();
        let uniform = StationaryDistribution::new(2, 1, vec![0.5, 0.5]).unwrap();
        assert!((expected_return(&flat, &uniform) - c).abs() < 1e-15);
    }

    #[test]
    fn optimal_occupancy_beats_random() {
        let env = build_four_room(11, 11, 0.0).unwrap();
        let sol = value_iteration(&env.mdp, 1e-10).unwrap();
        let random = TabularPolicy::uniform(104, 4);
        for gamma in [0.99, 1.0] {
            let opt = expected_return(&env.mdp, &stationary_distribution(&env.mdp, &sol.policy, gamma).unwrap());
            let rnd = expected_return(&env.mdp, &stationary_distribution(&env.mdp, &random, gamma).unwrap());
            assert!(opt > rnd, "gamma {gamma}: {opt} vs {rnd}");
        }
    }

    #[test]
    fn policy_return_matches_value_iteration() {
        let env = build_four_room(11, 11, 0.1).unwrap();
        let sol = value_iteration(&env.mdp, 1e-12).unwrap();
        let ret = policy_return(&env.mdp, &sol.policy).unwrap();
        assert!((ret - sol.value(env.start)).abs() < 1e-9);
    }
}
