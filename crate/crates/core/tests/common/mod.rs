#![allow(dead_code)]

use dwrl::dataset::TransitionRecord;
use dwrl::weighting::{dw_losses, DwConfig, WeightModel};
use rand::Rng;

pub fn random_model<R: Rng>(rng: &mut R, ns: usize, na: usize) -> WeightModel {
    let k = rng.random_range(1..=ns.min(3));
    let mut restart: Vec<(usize, f64)> = (0..k).map(|s| (s, rng.random_range(0.1..1.0))).collect();
    let z: f64 = restart.iter().map(|x| x.1).sum();
    restart.iter_mut().for_each(|x| x.1 /= z);
    let mut m = WeightModel::new(ns, na, restart).unwrap();
    m.phi_mut().iter_mut().for_each(|p| *p = rng.random_range(-2.0..2.0));
    m.psi_mut().iter_mut().for_each(|p| *p = rng.random_range(-2.0..2.0));
    m
}

pub fn random_batch<R: Rng>(rng: &mut R, ns: usize, na: usize, b: usize) -> Vec<TransitionRecord> {
    (0..b)
        .map(|t| {
            let flag = rng.random_range(0..6);
            TransitionRecord {
                traj_id: 0,
                t,
                s: rng.random_range(0..ns),
                a: rng.random_range(0..na),
                r: rng.random_range(-1.0..1.0),
                s_next: rng.random_range(0..ns),
                terminal: flag == 0,
                timeout: flag == 1,
            }
        })
        .collect()
}

/// Central finite differences of the total loss over every parameter.
pub fn fd_gradients(model: &WeightModel, batch: &[&TransitionRecord], cfg: &DwConfig, h: f64) -> (Vec<f64>, Vec<f64>) {
    let total = |m: &WeightModel| dw_losses(m, batch, cfg).unwrap().total;
    let mut dphi = vec![0.0; model.phi().len()];
    for (i, slot) in dphi.iter_mut().enumerate() {
        let mut plus = model.clone();
        plus.phi_mut()[i] += h;
        let mut minus = model.clone();
        minus.phi_mut()[i] -= h;
        *slot = (total(&plus) - total(&minus)) / (2.0 * h);
    }
    let mut dpsi = vec![0.0; model.psi().len()];
    for (i, slot) in dpsi.iter_mut().enumerate() {
        let mut plus = model.clone();
        plus.psi_mut()[i] += h;
        let mut minus = model.clone();
        minus.psi_mut()[i] -= h;
        *slot = (total(&plus) - total(&minus)) / (2.0 * h);
    }
    (dphi, dpsi)
}

/// Entry-wise relative error with an absolute floor for entries near zero.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Dense random MDP; the last state is terminal when `with_terminal`.
pub fn random_mdp<R: Rng>(rng: &mut R, ns: usize, na: usize, gamma: f64, with_terminal: bool) -> dwrl::mdp::TabularMdp {
    let mut transition = Vec::with_capacity(ns * na * ns);
    let mut reward = Vec::with_capacity(ns * na);
    for idx in 0..ns * na {
        if with_terminal && idx / na == ns - 1 {
            transition.extend((0..ns).map(|t| if t == ns - 1 { 1.0 } else { 0.0 }));
            reward.push(0.0);
            continue;
        }
        let row: Vec<f64> = (0..ns).map(|_| rng.random_range(0.0..1.0)).collect();
        let z: f64 = row.iter().sum();
        transition.extend(row.into_iter().map(|p| p / z));
        reward.push(rng.random_range(0.0..1.0));
    }
    let mut initial = vec![0.0; ns];
    initial[0] = 1.0;
    let mut terminal = vec![false; ns];
    if with_terminal {
        terminal[ns - 1] = true;
    }
    dwrl::mdp::TabularMdp::from_dense(ns, na, &transition, reward, initial, terminal, gamma, 50).unwrap()
}

pub fn random_policy<R: Rng>(rng: &mut R, ns: usize, na: usize) -> dwrl::mdp::TabularPolicy {
    let mut probs = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let row: Vec<f64> = (0..na).map(|_| rng.random_range(0.05..1.0)).collect();
        let z: f64 = row.iter().sum();
        probs.extend(row.into_iter().map(|p| p / z));
    }
    dwrl::mdp::TabularPolicy::new(ns, na, probs).unwrap()
}

pub fn toy_meta(ns: usize, na: usize, gamma: f64) -> dwrl::dataset::DatasetMeta {
    dwrl::dataset::DatasetMeta {
        env_name: "toy".into(),
        num_states: ns,
        num_actions: na,
        gamma,
        score_low: 0.0,
        score_high: 1.0,
        curation: "random".into(),
    }
}

/// Random chained trajectories of length 1 to `max_len`, each ending in a
/// terminal or a timeout.
pub fn random_trajectories<R: Rng>(rng: &mut R, ns: usize, na: usize, n: usize, max_len: usize) -> Vec<Vec<TransitionRecord>> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let terminal_end = rng.random_bool(0.5);
            let mut s = rng.random_range(0..ns);
            (0..len)
                .map(|t| {
                    let s_next = rng.random_range(0..ns);
                    let last = t + 1 == len;
                    let rec = TransitionRecord {
                        traj_id: 0,
                        t,
                        s,
                        a: rng.random_range(0..na),
                        r: (rng.random_range(-1.0..1.0f64) * 1e3).round() / 1e3,
                        s_next,
                        terminal: last && terminal_end,
                        timeout: last && !terminal_end,
                    };
                    s = s_next;
                    rec
                })
                .collect()
        })
        .collect()
}

pub fn random_dataset<R: Rng>(rng: &mut R, ns: usize, na: usize, n: usize, max_len: usize) -> dwrl::dataset::TransitionDataset {
    let trajs = random_trajectories(rng, ns, na, n, max_len);
    dwrl::dataset::TransitionDataset::from_trajectories(trajs, toy_meta(ns, na, 0.9)).unwrap()
}

/// Trains `algo` with unit multipliers (through `weighting`) next to the
/// unweighted reference on the same minibatches and returns the largest
/// table difference seen at any step.
pub fn unit_weight_gap(
    mdp: &dwrl::mdp::TabularMdp,
    ds: &dwrl::dataset::TransitionDataset,
    algo: dwrl::offline_rl::Algo,
    steps: usize,
    weighting: &dwrl::offline_rl::Weighting,
    reg_only: bool,
) -> f64 {
    use dwrl::offline_rl::{reference, train_with, AlgoConfig};
    use dwrl::rng::{derive_seed, seeded_rng};
    use dwrl::sampling::{draw_minibatch, uniform_sampler};

    let mut cfg = AlgoConfig::new(algo, ds.meta().gamma);
    cfg.steps = steps;
    cfg.eval_every = steps;
    cfg.eval_episodes = 1;
    cfg.seed = 5;
    cfg.reg_only = reg_only;
    let (ns, na) = (ds.meta().num_states, ds.meta().num_actions);
    let mut reference = reference::Learner::new(ns, na, cfg);
    let sampler = uniform_sampler(ds).unwrap();
    let mut rng = seeded_rng(derive_seed(cfg.seed, 1));
    let mut gap = 0.0f64;
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    train_with(mdp, ds, &cfg, weighting, &dwrl::weighting::DwConfig::default(), "unit", |_, learner| {
        let batch: Vec<&TransitionRecord> =
            draw_minibatch(&sampler, cfg.batch_size, &mut rng).into_iter().map(|i| &ds.records()[i]).collect();
        reference.step(&batch);
        gap = gap
            .max(diff(learner.q().values(), reference.q.values()))
            .max(diff(learner.v().values(), reference.v.values()))
            .max(diff(learner.scores().values(), reference.scores.values()));
    })
    .unwrap();
    gap
}
