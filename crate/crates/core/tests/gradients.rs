mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use theorylab_core::flow_model::{LogFlowParams, Trajectory};
use theorylab_core::graph::{build_chain, build_diamond, build_grid, GridReward};
use theorylab_core::objectives::{
    db_loss_grad, exhaustive_loss_grad, fm_loss_grad, tb_loss_grad, tb_loss_grad_weighted,
};
use theorylab_core::{Env, LossGrad};

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;
const POINTS: usize = 100;

fn fm_loss(env: &Env, w: &[f64]) -> f64 {
    let n = env.dag.n_states();
    let mut total = 0.0;
    let mut count = 0;
    for s in (0..n).filter(|&s| s != env.dag.source()) {
        let inflow: f64 = env.dag.edges().iter().enumerate().filter(|(_, &(_, h))| h == s).map(|(e, _)| w[e].exp()).sum();
        let outs = out_edges(env, s);
        let out = if outs.is_empty() { reward(env, s) } else { outs.iter().map(|&e| w[e].exp()).sum() };
        total += (inflow - out).powi(2);
        count += 1;
    }
    total / count as f64
}

fn db_loss(env: &Env, w: &[f64]) -> f64 {
    let m = env.dag.n_edges();
    let mut total = 0.0;
    for e in 0..m {
        let head = env.dag.edge(e).1;
        let outs = out_edges(env, head);
        let f_head = if outs.is_empty() { reward(env, head) } else { outs.iter().map(|&k| w[k].exp()).sum() };
        let pb = 1.0 / in_degree(env, head) as f64;
        total += (w[e].exp() / (f_head * pb) - 1.0).powi(2);
    }
    total / m as f64
}

fn tb_loss(env: &Env, paths: &[Vec<usize>], weights: &[f64], w: &[f64], zeta: f64) -> f64 {
    paths
        .iter()
        .zip(weights)
        .map(|(p, wt)| {
            let r = zeta.exp() * path_prob(env, w, p) / (reward(env, terminal_of(env, p)) * path_backward_prob(env, p));
            wt * (r - 1.0).powi(2)
        })
        .sum()
}

/// Normwise relative error `|a - b|_inf / |b|_inf` with `b` the reference.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = numeric.iter().map(|b| b.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + H;
        let up = f(&xp);
        xp[i] = orig - H;
        let down = f(&xp);
        xp[i] = orig;
        g[i] = (up - down) / (2.0 * H);
    }
    g
}

fn random_point(env: &Env, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let w = (0..env.dag.n_edges()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let zeta = env.rewards.z_r().ln() + rng.random_range(-0.5..0.5);
    (w, zeta)
}

fn trajectories(env: &Env, paths: &[Vec<usize>]) -> Vec<Trajectory> {
    paths.iter().map(|p| Trajectory::from_edges(&env.dag, p.clone()).unwrap()).collect()
}

fn flat(lg: &LossGrad, with_zeta: bool) -> Vec<f64> {
    let mut v = lg.grad_w.clone();
    if with_zeta {
        v.push(lg.grad_zeta);
    }
    v
}

fn envs() -> Vec<(&'static str, Env)> {
    vec![
        ("chain4", build_chain(4, 2.0).unwrap()),
        ("diamond", build_diamond(1.0).unwrap()),
        ("grid2x3", build_grid(2, 3, GridReward::Corner).unwrap()),
    ]
}

#[test]
fn fm_gradient_matches_finite_differences() {
    for (name, env) in envs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states: Vec<usize> = (1..env.dag.n_states()).collect();
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let (w, zeta) = random_point(&env, &mut rng);
            let params = LogFlowParams::new(w.clone(), zeta).unwrap();
            let lg = fm_loss_grad(&params, &env.dag, &env.rewards, &states).unwrap();
            let oracle = fm_loss(&env, &w);
            assert!((lg.loss - oracle).abs() <= 1e-12 * oracle.max(1.0), "{name}: loss {} vs {}", lg.loss, oracle);
            assert_eq!(lg.grad_zeta, 0.0);
            worst = worst.max(rel_err(&lg.grad_w, &central_diff(|x| fm_loss(&env, x), &w)));
        }
        assert!(worst <= TOL, "{name}: FM max relative error {worst:e}");
    }
}

#[test]
fn db_gradient_matches_finite_differences() {
    for (name, env) in envs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let edges: Vec<usize> = (0..env.dag.n_edges()).collect();
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let (w, zeta) = random_point(&env, &mut rng);
            let params = LogFlowParams::new(w.clone(), zeta).unwrap();
            let lg = db_loss_grad(&params, &env.dag, &env.rewards, &edges).unwrap();
            let oracle = db_loss(&env, &w);
            assert!((lg.loss - oracle).abs() <= 1e-12 * oracle.max(1.0), "{name}: loss {} vs {}", lg.loss, oracle);
            worst = worst.max(rel_err(&lg.grad_w, &central_diff(|x| db_loss(&env, x), &w)));
        }
        assert!(worst <= TOL, "{name}: DB max relative error {worst:e}");
    }
}

#[test]
fn tb_gradient_matches_finite_differences() {
    for (name, env) in envs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let paths = all_paths(&env);
        let trajs = trajectories(&env, &paths);
        let uniform = vec![1.0 / paths.len() as f64; paths.len()];
        let m = env.dag.n_edges();
        let mut worst: f64 = 0.0;
        for _ in 0..POINTS {
            let (w, zeta) = random_point(&env, &mut rng);
            let params = LogFlowParams::new(w.clone(), zeta).unwrap();
            let lg = tb_loss_grad(&params, &env.dag, &env.rewards, &trajs).unwrap();
            let oracle = tb_loss(&env, &paths, &uniform, &w, zeta);
            assert!((lg.loss - oracle).abs() <= 1e-12 * oracle.max(1.0), "{name}: loss {} vs {}", lg.loss, oracle);
            let mut x = w.clone();
            x.push(zeta);
            let fd = central_diff(|x| tb_loss(&env, &paths, &uniform, &x[..m], x[m]), &x);
            worst = worst.max(rel_err(&flat(&lg, true), &fd));
        }
        assert!(worst <= TOL, "{name}: TB max relative error {worst:e}");
    }
}

#[test]
fn exhaustive_tb_holds_forward_weights_fixed() {
    let env = build_diamond(1.0).unwrap();
    let paths = all_paths(&env);
    let trajs = trajectories(&env, &paths);
    let rewards = env.rewards.per_state();
    let m = env.dag.n_edges();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let (w, zeta) = random_point(&env, &mut rng);
        let params = LogFlowParams::new(w.clone(), zeta).unwrap();
        let weights: Vec<f64> = paths.iter().map(|p| path_prob(&env, &w, p)).collect();
        let lg = exhaustive_loss_grad(theorylab_core::Objective::Tb, &params, &env.dag, &rewards, &trajs).unwrap();
        let direct = tb_loss_grad_weighted(&params, &env.dag, &rewards, &trajs, &weights).unwrap();
        assert!((lg.loss - tb_loss(&env, &paths, &weights, &w, zeta)).abs() < 1e-12);
        let mut x = w.clone();
        x.push(zeta);
        let fd = central_diff(|x| tb_loss(&env, &paths, &weights, &x[..m], x[m]), &x);
        assert!(rel_err(&flat(&lg, true), &fd) <= TOL);
        assert!(rel_err(&flat(&lg, true), &flat(&direct, true)) < 1e-14);
    }
}

#[test]
fn spec_loss_values() {
    // V2, uniform policy, zeta = ln 4, both trajectories weighted by P_F
    let env = theorylab_core::graph::build_v2(1.0, 3.0).unwrap();
    let trajs = trajectories(&env, &all_paths(&env));
    let params = LogFlowParams::new(vec![0.0, 0.0], 4f64.ln()).unwrap();
    let lg = exhaustive_loss_grad(theorylab_core::Objective::Tb, &params, &env.dag, &env.rewards.per_state(), &trajs)
        .unwrap();
    assert!((lg.loss - 5.0 / 9.0).abs() < 1e-12);

    // diamond flows (0.8, 0.2, 0.5, 0.5): a->t balanced, s0->a gives 0.36
    let env = build_diamond(1.0).unwrap();
    let w: Vec<f64> = [0.8f64, 0.2, 0.5, 0.5].iter().map(|f| f.ln()).collect();
    let params = LogFlowParams::new(w, 0.0).unwrap();
    let a_t = env.dag.find_edge(1, 3).unwrap();
    let s0_a = env.dag.find_edge(0, 1).unwrap();
    assert!(db_loss_grad(&params, &env.dag, &env.rewards, &[a_t]).unwrap().loss.abs() < 1e-15);
    assert!((db_loss_grad(&params, &env.dag, &env.rewards, &[s0_a]).unwrap().loss - 0.36).abs() < 1e-12);

    // chain s0 -> s1 -> t with flows (2, 1), R = 1: residual at s1 is 1
    let env = build_chain(2, 1.0).unwrap();
    let params = LogFlowParams::new(vec![2f64.ln(), 0.0], 0.0).unwrap();
    assert!((fm_loss_grad(&params, &env.dag, &env.rewards, &[1]).unwrap().loss - 1.0).abs() < 1e-12);
}

#[test]
fn losses_invariant_under_edge_reordering() {
    let env = build_grid(2, 2, GridReward::Corner).unwrap();
    let m = env.dag.n_edges();
    let perm: Vec<usize> = (0..m).rev().collect();
    let edges: Vec<(usize, usize)> = perm.iter().map(|&e| env.dag.edge(e)).collect();
    let dag2 = theorylab_core::Dag::new(env.dag.n_states(), env.dag.source(), edges).unwrap();
    let rewards2 = theorylab_core::RewardTable::from_values(&dag2, env.rewards.values().to_vec()).unwrap();
    let env2 = Env::new(dag2, rewards2);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..10 {
        let (w, zeta) = random_point(&env, &mut rng);
        let w2: Vec<f64> = perm.iter().map(|&e| w[e]).collect();
        assert!((fm_loss(&env, &w) - fm_loss(&env2, &w2)).abs() < 1e-12);
        assert!((db_loss(&env, &w) - db_loss(&env2, &w2)).abs() < 1e-12);
        let p1 = LogFlowParams::new(w.clone(), zeta).unwrap();
        let p2 = LogFlowParams::new(w2, zeta).unwrap();
        let t1 = trajectories(&env, &all_paths(&env));
        let t2 = trajectories(&env2, &all_paths(&env2));
        let l1 = tb_loss_grad(&p1, &env.dag, &env.rewards, &t1).unwrap().loss;
        let l2 = tb_loss_grad(&p2, &env2.dag, &env2.rewards, &t2).unwrap().loss;
        assert!((l1 - l2).abs() < 1e-12);
    }
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn all_objectives_on_asym_diamond(w in proptest::collection::vec(-2.0f64..2.0, 5), zeta in -1.0f64..2.0) {
            let env = theorylab_core::graph::build_asym_diamond(1.0, 2.0).unwrap();
            let params = LogFlowParams::new(w.clone(), zeta).unwrap();
            let states: Vec<usize> = (1..env.dag.n_states()).collect();
            let fm = fm_loss_grad(&params, &env.dag, &env.rewards, &states).unwrap();
            prop_assert!(rel_err(&fm.grad_w, &central_diff(|x| fm_loss(&env, x), &w)) <= TOL);
            let edges: Vec<usize> = (0..5).collect();
            let db = db_loss_grad(&params, &env.dag, &env.rewards, &edges).unwrap();
            prop_assert!(rel_err(&db.grad_w, &central_diff(|x| db_loss(&env, x), &w)) <= TOL);
            let paths = all_paths(&env);
            let uniform = vec![1.0 / paths.len() as f64; paths.len()];
            let tb = tb_loss_grad(&params, &env.dag, &env.rewards, &trajectories(&env, &paths)).unwrap();
            let mut x = w.clone();
            x.push(zeta);
            let fd = central_diff(|x| tb_loss(&env, &paths, &uniform, &x[..5], x[5]), &x);
            prop_assert!(rel_err(&flat(&tb, true), &fd) <= TOL);
        }
    }
}
