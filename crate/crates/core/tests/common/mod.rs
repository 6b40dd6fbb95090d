#![allow(dead_code)]

use theorylab_core::graph::{build_asym_diamond, build_chain, build_diamond, build_grid, build_v2, GridReward};
use theorylab_core::Env;

/// Every environment shipped with the crate, under a short name.
pub fn bundled() -> Vec<(&'static str, Env)> {
    vec![
        ("chain4", build_chain(4, 2.0).unwrap()),
        ("chain8", build_chain(8, 1.0).unwrap()),
        ("v2", build_v2(1.0, 3.0).unwrap()),
        ("diamond", build_diamond(1.0).unwrap()),
        ("asym_diamond", build_asym_diamond(1.0, 1.0).unwrap()),
        ("grid1x2", build_grid(1, 2, GridReward::Uniform).unwrap()),
        ("grid2x2_corner", build_grid(2, 2, GridReward::Corner).unwrap()),
        ("grid2x3_uniform", build_grid(2, 3, GridReward::Uniform).unwrap()),
        ("grid2x3_center", build_grid(2, 3, GridReward::Center).unwrap()),
        ("grid3x3_corner", build_grid(3, 3, GridReward::Corner).unwrap()),
    ]
}

/// Source-to-terminal paths by plain recursion, as edge lists.
pub fn all_paths(env: &Env) -> Vec<Vec<usize>> {
    fn go(env: &Env, s: usize, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        let outs: Vec<usize> = (0..env.dag.n_edges()).filter(|&e| env.dag.edge(e).0 == s).collect();
        if outs.is_empty() {
            out.push(path.clone());
            return;
        }
        for e in outs {
            path.push(e);
            go(env, env.dag.edge(e).1, path, out);
            path.pop();
        }
    }
    let mut out = Vec::new();
    go(env, env.dag.source(), &mut Vec::new(), &mut out);
    out
}

pub fn in_degree(env: &Env, s: usize) -> usize {
    env.dag.edges().iter().filter(|&&(_, h)| h == s).count()
}

pub fn out_edges(env: &Env, s: usize) -> Vec<usize> {
    (0..env.dag.n_edges()).filter(|&e| env.dag.edge(e).0 == s).collect()
}

pub fn reward(env: &Env, s: usize) -> f64 {
    env.rewards.get(s).unwrap()
}

/// Forward probability of a path under softmax(w) per state.
pub fn path_prob(env: &Env, w: &[f64], path: &[usize]) -> f64 {
    path.iter()
        .map(|&e| {
            let tail = env.dag.edge(e).0;
            let denom: f64 = out_edges(env, tail).iter().map(|&k| w[k].exp()).sum();
            w[e].exp() / denom
        })
        .product()
}

/// Uniform-parent backward probability of a path.
pub fn path_backward_prob(env: &Env, path: &[usize]) -> f64 {
    path.iter().map(|&e| 1.0 / in_degree(env, env.dag.edge(e).1) as f64).product()
}

pub fn terminal_of(env: &Env, path: &[usize]) -> usize {
    env.dag.edge(*path.last().unwrap()).1
}
