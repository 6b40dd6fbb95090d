mod common;

use std::collections::HashMap;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use theorylab_core::flow_model::{
    backward_policy_uniform, forward_policy, sample_backward, sample_forward, trajectory_logprob, LogFlowParams,
    Trajectory,
};
use theorylab_core::graph::{build_chain, build_diamond, build_v2};
use theorylab_core::Env;

const DRAWS: usize = 100_000;

/// Every path count within `k` binomial standard deviations of `N p`.
fn within_bands(counts: &HashMap<Vec<usize>, usize>, expected: &[(Vec<usize>, f64)], k: f64) -> Result<(), String> {
    let n = DRAWS as f64;
    let total: usize = counts.values().sum();
    assert_eq!(total, DRAWS);
    for (path, p) in expected {
        let c = *counts.get(path).unwrap_or(&0) as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        if (c - n * p).abs() > k * sd.max(1e-12) {
            return Err(format!("path {path:?}: count {c} vs expected {} (sd {sd})", n * p));
        }
    }
    for path in counts.keys() {
        if !expected.iter().any(|(p, _)| p == path) {
            return Err(format!("path {path:?} outside the support"));
        }
    }
    Ok(())
}

fn forward_counts(env: &Env, params: &LogFlowParams, seed: u64) -> HashMap<Vec<usize>, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = HashMap::new();
    for _ in 0..DRAWS {
        *counts.entry(sample_forward(params, &env.dag, &mut rng).edges().to_vec()).or_insert(0) += 1;
    }
    counts
}

fn backward_counts(env: &Env, seed: u64) -> HashMap<Vec<usize>, usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = HashMap::new();
    for _ in 0..DRAWS {
        *counts.entry(sample_backward(&env.dag, &env.rewards, &mut rng).edges().to_vec()).or_insert(0) += 1;
    }
    counts
}

#[test]
fn forward_sampler_matches_exact_path_probabilities() {
    for (i, env) in [build_v2(1.0, 3.0).unwrap(), build_diamond(1.0).unwrap()].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        for trial in 0..3 {
            let w: Vec<f64> = (0..env.dag.n_edges()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let params = LogFlowParams::new(w.clone(), 0.0).unwrap();
            let expected: Vec<(Vec<usize>, f64)> =
                all_paths(&env).into_iter().map(|p| { let q = path_prob(&env, &w, &p); (p, q) }).collect();
            let counts = forward_counts(&env, &params, 7 + trial);
            within_bands(&counts, &expected, 4.0).unwrap();
        }
    }
}

#[test]
fn backward_sampler_matches_reward_times_uniform_parents() {
    for env in [build_v2(1.0, 3.0).unwrap(), build_diamond(1.0).unwrap()] {
        let z = env.rewards.z_r();
        let expected: Vec<(Vec<usize>, f64)> = all_paths(&env)
            .into_iter()
            .map(|p| {
                let q = reward(&env, terminal_of(&env, &p)) / z * path_backward_prob(&env, &p);
                (p, q)
            })
            .collect();
        within_bands(&backward_counts(&env, 3), &expected, 4.0).unwrap();
    }
}

#[test]
fn spec_sampler_frequencies() {
    let env = build_v2(1.0, 3.0).unwrap();
    let t1 = env.dag.find_edge(0, 1).unwrap();
    let freq = |counts: &HashMap<Vec<usize>, usize>| *counts.get(&vec![t1]).unwrap_or(&0) as f64 / DRAWS as f64;

    let uniform = LogFlowParams::new(vec![0.0, 0.0], 0.0).unwrap();
    assert!((freq(&forward_counts(&env, &uniform, 1)) - 0.5).abs() <= 0.01);
    let skew = LogFlowParams::new(vec![3f64.ln(), 0.0], 0.0).unwrap();
    assert!((freq(&forward_counts(&env, &skew, 2)) - 0.75).abs() <= 0.012);
    // backward: t2 carries 3 / 4
    assert!((1.0 - freq(&backward_counts(&env, 4)) - 0.75).abs() <= 0.012);

    let diamond = build_diamond(1.0).unwrap();
    let counts = backward_counts(&diamond, 5);
    for c in counts.values() {
        assert!((*c as f64 / DRAWS as f64 - 0.5).abs() <= 0.01);
    }
}

#[test]
fn chain_samplers_return_the_unique_path() {
    let env = build_chain(5, 1.0).unwrap();
    let params = LogFlowParams::new(vec![0.3; 5], 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        assert_eq!(sample_forward(&params, &env.dag, &mut rng).edges(), &[0, 1, 2, 3, 4]);
        assert_eq!(sample_backward(&env.dag, &env.rewards, &mut rng).edges(), &[0, 1, 2, 3, 4]);
    }
    let traj = Trajectory::from_edges(&env.dag, vec![0, 1, 2, 3, 4]).unwrap();
    assert_eq!(trajectory_logprob(&params, &env.dag, &traj).unwrap(), 0.0);
}

#[test]
fn policy_examples() {
    let env = build_v2(1.0, 3.0).unwrap();
    let p = forward_policy(&LogFlowParams::new(vec![3f64.ln(), 0.0], 0.0).unwrap(), &env.dag, 0).unwrap();
    assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
    assert!(forward_policy(&LogFlowParams::new(vec![0.0, 0.0], 0.0).unwrap(), &env.dag, 1).is_err());

    let diamond = build_diamond(1.0).unwrap();
    assert_eq!(backward_policy_uniform(&diamond.dag, 3).unwrap(), vec![0.5, 0.5]);
    assert!(backward_policy_uniform(&diamond.dag, 0).is_err());
    let half = LogFlowParams::new(vec![0.0; 4], 0.0).unwrap();
    for path in all_paths(&diamond) {
        let t = Trajectory::from_edges(&diamond.dag, path).unwrap();
        assert!((trajectory_logprob(&half, &diamond.dag, &t).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    // four parents
    let dag = theorylab_core::Dag::new(6, 0, vec![(0, 1), (0, 2), (0, 3), (0, 4), (1, 5), (2, 5), (3, 5), (4, 5)]).unwrap();
    assert_eq!(backward_policy_uniform(&dag, 5).unwrap(), vec![0.25; 4]);
}

mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #[test]
        fn softmax_shift_invariance(w in proptest::collection::vec(-3.0f64..3.0, 2), c in -10.0f64..10.0) {
            let env = build_v2(1.0, 3.0).unwrap();
            let a = forward_policy(&LogFlowParams::new(w.clone(), 0.0).unwrap(), &env.dag, 0).unwrap();
            let b = forward_policy(&LogFlowParams::new(w.iter().map(|x| x + c).collect(), 0.0).unwrap(), &env.dag, 0).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn path_probabilities_sum_to_one(seed in 0u64..1000) {
            for (_, env) in bundled() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w: Vec<f64> = (0..env.dag.n_edges()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let params = LogFlowParams::new(w, 0.0).unwrap();
                let total: f64 = all_paths(&env)
                    .into_iter()
                    .map(|p| trajectory_logprob(&params, &env.dag, &Trajectory::from_edges(&env.dag, p).unwrap()).unwrap().exp())
                    .sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}
