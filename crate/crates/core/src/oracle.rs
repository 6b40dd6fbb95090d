//! Exact ground truth for small DAGs.
//!
//! The flow constraints form `A f = b` with `A[s][e] = +1` when `e` leaves
//! `s`, `-1` when it enters `s`; `b` is `Z_R` at the source, `-R(x)` at each
//! terminal and zero elsewhere. Everything here is dense and meant for
//! desk-scale graphs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow_model::{
    backward_logprob, logprob_unchecked, node_outflow, sample_forward, softmax_out, state_visitation,
    LogFlowParams, Trajectory,
};
use crate::graph::{Dag, Env, RewardTable, StateId};
use crate::objectives::{db_loss_grad_with, fm_loss_grad_with, tb_loss_grad_weighted, Objective};

/// Default cap on the number of enumerated trajectories.
pub const DEFAULT_TRAJECTORY_CAP: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("solver failed: {message} (residual {residual:e})")]
    Solver { message: String, residual: f64 },
    #[error("max-entropy dual did not converge in {iters} iterations (residual {residual:e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sampling probability of trajectory {index} is zero where the target is positive")]
    InfiniteDiscrepancy { index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    source: StateId,
}

impl IncidenceSystem {
    pub fn partition(&self) -> f64 {
        self.b[self.source]
    }

    pub fn source(&self) -> StateId {
        self.source
    }

    /// `max_s |(A f - b)_s|`.
    pub fn residual_inf(&self, flows: &[f64]) -> f64 {
        let f = DVector::from_column_slice(flows);
        (&self.a * f - &self.b).amax()
    }
}

pub fn build_incidence(dag: &Dag, rewards: &RewardTable) -> IncidenceSystem {
    let mut a = DMatrix::zeros(dag.n_states(), dag.n_edges());
    for (e, &(tail, head)) in dag.edges().iter().enumerate() {
        a[(tail, e)] = 1.0;
        a[(head, e)] = -1.0;
    }
    let mut b = DVector::zeros(dag.n_states());
    b[dag.source()] = rewards.z_r();
    for (&t, &r) in rewards.terminals().iter().zip(rewards.values()) {
        b[t] = -r;
    }
    IncidenceSystem { a, b, source: dag.source() }
}

/// Minimum Euclidean norm solution of `A f = b` via the SVD pseudo-inverse.
/// Entries may be negative.
pub fn min_norm_flow(system: &IncidenceSystem) -> Result<Vec<f64>, OracleError> {
    let svd = system.a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = 1e-12 * max_sv.max(1.0);
    let f = svd.solve(&system.b, eps).map_err(|m| OracleError::Solver {
        message: m.to_string(),
        residual: f64::NAN,
    })?;
    let flows: Vec<f64> = f.iter().copied().collect();
    let residual = system.residual_inf(&flows);
    if !(residual <= 1e-9 * system.partition().max(1.0)) {
        return Err(OracleError::Solver { message: "least-squares residual too large".into(), residual });
    }
    Ok(flows)
}

/// A feasible edge flow with derived node flows, terminal distribution and entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSolution {
    pub edge_flows: Vec<f64>,
    pub node_flows: Vec<f64>,
    pub terminal_dist: Vec<f64>,
    pub entropy: f64,
}

impl FlowSolution {
    /// Node flow is the outflow, or the inflow for terminals.
    pub fn from_edge_flows(dag: &Dag, partition: f64, edge_flows: Vec<f64>) -> Self {
        let node_flows: Vec<f64> = (0..dag.n_states())
            .map(|s| {
                let adj = if dag.is_terminal(s) { dag.in_edges(s) } else { dag.out_edges(s) };
                adj.iter().map(|&e| edge_flows[e]).sum()
            })
            .collect();
        let inflows: Vec<f64> = dag.terminals().iter().map(|&t| node_flows[t]).collect();
        let total: f64 = inflows.iter().sum();
        let terminal_dist = inflows.iter().map(|v| v / total).collect();
        let entropy = flow_entropy(&edge_flows, partition);
        Self { edge_flows, node_flows, terminal_dist, entropy }
    }
}

/// `-sum (f/Z) ln(f/Z)` over strictly positive entries.
pub fn flow_entropy(edge_flows: &[f64], partition: f64) -> f64 {
    edge_flows
        .iter()
        .filter(|&&f| f > 0.0)
        .map(|&f| {
            let p = f / partition;
            -p * p.ln()
        })
        .sum()
}

/// Settings for [`max_entropy_flow`].
#[derive(Debug, Clone, Copy)]
pub struct MaxEntOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for MaxEntOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 100_000 }
    }
}

/// The feasible flow of maximum entropy.
///
/// The optimum has the form `f_e = Z exp(-1 - (u_tail - u_head))` in the
/// state potentials `u`, so we minimise the smooth convex dual
/// `sum_e f_e(u) + u.b` over `u` (source pinned to zero) with damped Newton
/// steps and Armijo backtracking until `|A f - b|_inf <= tol`.
pub fn max_entropy_flow(
    system: &IncidenceSystem,
    dag: &Dag,
    tol: f64,
    max_iters: usize,
) -> Result<FlowSolution, OracleError> {
    if !(tol > 0.0) {
        return Err(OracleError::InvalidArgument("tol must be positive".into()));
    }
    let z = system.partition();
    let n = dag.n_states();
    let src = system.source();
    // reduced coordinates skip the source
    let free: Vec<StateId> = (0..n).filter(|&s| s != src).collect();
    let mut pos = vec![usize::MAX; n];
    for (i, &s) in free.iter().enumerate() {
        pos[s] = i;
    }
    let edges = dag.edges();
    let flows_at = |u: &[f64]| -> Vec<f64> {
        edges.iter().map(|&(t, h)| z * (-1.0 - (u[t] - u[h])).exp()).collect()
    };
    let dual = |u: &[f64], f: &[f64]| -> f64 {
        f.iter().sum::<f64>() + u.iter().zip(system.b.iter()).map(|(a, b)| a * b).sum::<f64>()
    };

    let mut u = vec![0.0; n];
    let mut f = flows_at(&u);
    let mut residual = f64::INFINITY;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stall = 0;
    for _ in 0..max_iters {
        // gradient of the dual: b - A f
        let mut grad = system.b.clone();
        for (e, &(t, h)) in edges.iter().enumerate() {
            grad[t] -= f[e];
            grad[h] += f[e];
        }
        residual = grad.amax();
        if residual <= tol {
            // keep stepping while the residual still falls, down to round-off
            let prev = best.as_ref().map_or(f64::INFINITY, |(r, _)| *r);
            stall = if residual < 0.5 * prev { 0 } else { stall + 1 };
            if residual < prev {
                best = Some((residual, f.clone()));
            }
            if stall >= 3 || residual <= 16.0 * f64::EPSILON * z {
                let (_, fb) = best.take().unwrap();
                return Ok(FlowSolution::from_edge_flows(dag, z, fb));
            }
        }
        let m = free.len();
        let mut hess = DMatrix::<f64>::zeros(m, m);
        let mut g = DVector::<f64>::zeros(m);
        for (i, &s) in free.iter().enumerate() {
            g[i] = grad[s];
        }
        for (e, &(t, h)) in edges.iter().enumerate() {
            let (pt, ph) = (pos[t], pos[h]);
            if pt != usize::MAX {
                hess[(pt, pt)] += f[e];
            }
            if ph != usize::MAX {
                hess[(ph, ph)] += f[e];
            }
            if pt != usize::MAX && ph != usize::MAX {
                hess[(pt, ph)] -= f[e];
                hess[(ph, pt)] -= f[e];
            }
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => -ch.solve(&g),
            None => -hess.clone().lu().solve(&g).ok_or_else(|| OracleError::Solver {
                message: "singular dual Hessian".into(),
                residual,
            })?,
        };
        let slope = g.dot(&step);
        let base = dual(&u, &f);
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            let mut trial = u.clone();
            for (i, &s) in free.iter().enumerate() {
                trial[s] += t * step[i];
            }
            let ft = flows_at(&trial);
            // near the optimum the dual is flat to round-off; a full step that
            // shrinks the residual is then accepted without the Armijo test
            let full_ok = t == 1.0 && residual < 1e-6 * z && system.residual_inf(&ft) < residual;
            if ft.iter().all(|v| v.is_finite()) && (full_ok || dual(&trial, &ft) <= base + 1e-4 * t * slope) {
                u = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // Newton direction stalled at round-off; a plain gradient step keeps going
            let gt = 1.0 / hess.diagonal().amax().max(1e-300);
            for (i, &s) in free.iter().enumerate() {
                u[s] -= gt * g[i];
            }
            f = flows_at(&u);
        }
    }
    if let Some((_, fb)) = best {
        return Ok(FlowSolution::from_edge_flows(dag, z, fb));
    }
    Err(OracleError::NonConvergence { iters: max_iters, residual })
}

/// The flow whose backward policy is uniform over parents: each state's
/// node flow is split equally among its incoming edges. This is the unique
/// zero of the DB loss when `P_B` is uniform.
pub fn backward_uniform_flow(dag: &Dag, rewards: &RewardTable) -> Vec<f64> {
    let mut node = rewards.per_state();
    let mut flows = vec![0.0; dag.n_edges()];
    for &s in dag.topological_order().iter().rev() {
        if !dag.is_terminal(s) {
            node[s] = dag.out_edges(s).iter().map(|&e| flows[e]).sum();
        }
        if s == dag.source() {
            continue;
        }
        let parents = dag.in_edges(s);
        let share = node[s] / parents.len() as f64;
        for &e in parents {
            flows[e] = share;
        }
    }
    flows
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub trajectories: Vec<Trajectory>,
    /// `R(x) P_B(tau | x) / Z_R`; marginal over terminals is `R / Z_R`.
    pub target_probs: Vec<f64>,
}

impl TrajectoryTable {
    pub fn count(&self) -> usize {
        self.trajectories.len()
    }

    /// Forward-policy probability of every trajectory.
    pub fn forward_probs(&self, params: &LogFlowParams, dag: &Dag) -> Vec<f64> {
        self.trajectories.iter().map(|t| logprob_unchecked(params, dag, t).exp()).collect()
    }
}

/// All source-to-terminal paths in lexicographic edge order.
pub fn enumerate_trajectories(dag: &Dag, rewards: &RewardTable, cap: usize) -> Result<TrajectoryTable, OracleError> {
    let mut out = Vec::new();
    let mut edges = Vec::new();
    let mut states = vec![dag.source()];
    // explicit stack of (state, next out-edge position)
    let mut stack: Vec<(StateId, usize)> = vec![(dag.source(), 0)];
    while let Some(top) = stack.last_mut() {
        let (s, next) = *top;
        if dag.is_terminal(s) {
            if out.len() == cap {
                return Err(OracleError::ResourceLimit(format!("more than {cap} trajectories")));
            }
            out.push(Trajectory::from_parts_unchecked(states.clone(), edges.clone()));
            stack.pop();
            states.pop();
            edges.pop();
            continue;
        }
        if next < dag.out_edges(s).len() {
            top.1 += 1;
            let e = dag.out_edges(s)[next];
            let h = dag.edge(e).1;
            edges.push(e);
            states.push(h);
            stack.push((h, 0));
        } else {
            stack.pop();
            states.pop();
            edges.pop();
        }
    }
    let z = rewards.z_r();
    let target_probs = out
        .iter()
        .map(|t| rewards.get(t.terminal()).unwrap() / z * backward_logprob(dag, t).exp())
        .collect();
    Ok(TrajectoryTable { trajectories: out, target_probs })
}

/// `max_tau target(tau) / sample(tau)`.
pub fn discrepancy(table: &TrajectoryTable, sample_probs: &[f64]) -> Result<f64, OracleError> {
    if sample_probs.len() != table.count() {
        return Err(OracleError::InvalidArgument(format!(
            "{} sampling probabilities for {} trajectories",
            sample_probs.len(),
            table.count()
        )));
    }
    let total: f64 = sample_probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 || sample_probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(OracleError::InvalidArgument("sampling probabilities must form a distribution".into()));
    }
    let mut worst: f64 = 0.0;
    for (index, (&t, &p)) in table.target_probs.iter().zip(sample_probs).enumerate() {
        if t > 0.0 {
            if p <= 0.0 {
                return Err(OracleError::InfiniteDiscrepancy { index });
            }
            worst = worst.max(t / p);
        }
    }
    Ok(worst)
}

/// `R / Z_R` in terminal order.
pub fn exact_terminal_distribution(rewards: &RewardTable) -> Vec<f64> {
    rewards.values().iter().map(|r| r / rewards.z_r()).collect()
}

/// Random feasible flow: for each terminal, its reward is split over the
/// paths ending there with Dirichlet(1) weights.
pub fn random_path_mixture_flow<R: Rng + ?Sized>(
    dag: &Dag,
    rewards: &RewardTable,
    table: &TrajectoryTable,
    rng: &mut R,
) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..table.count()).map(|_| Exp1.sample(rng)).collect();
    let mut per_terminal = vec![0.0; dag.n_states()];
    for (t, d) in table.trajectories.iter().zip(&draws) {
        per_terminal[t.terminal()] += d;
    }
    for (t, d) in table.trajectories.iter().zip(draws.iter_mut()) {
        *d /= per_terminal[t.terminal()];
    }
    let mut flows = vec![0.0; dag.n_edges()];
    for (t, d) in table.trajectories.iter().zip(&draws) {
        let r = rewards.get(t.terminal()).unwrap();
        for &e in t.edges() {
            flows[e] += r * d;
        }
    }
    flows
}

/// Rank of a dense matrix by SVD with a relative threshold.
pub fn matrix_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let tol = 1e-10 * sv.max().max(1.0) * m.nrows().max(m.ncols()) as f64;
    sv.iter().filter(|&&v| v > tol).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRank {
    pub index: usize,
    pub length: usize,
    pub rank: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRegression {
    /// Least-squares slope through the origin.
    pub slope: f64,
    pub r2: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// `min_s pi(s) * |S|` under the forward policy.
    pub min_visit_scaled: f64,
    pub ranks: Vec<TrajectoryRank>,
    pub min_rank_ratio: f64,
    /// Mean lag-k covariance of per-edge flow errors along trajectories,
    /// divided by the lag-0 variance. Index 0 is 1 unless all errors vanish.
    pub lag_correlations: Vec<f64>,
    /// Smallest `rho` with `corr_k <= rho^k` for every observed lag `k >= 1`.
    pub fitted_rho: f64,
    pub edge_error_mean: f64,
    pub error_regression: ErrorRegression,
}

/// Empirical checks of the visitation, error-correlation, rank and
/// error-propagation assumptions at `params`. Perturbations add iid
/// `N(0, noise_probe^2)` to every `w` entry.
pub fn audit_assumptions<R: Rng + ?Sized>(
    dag: &Dag,
    table: &TrajectoryTable,
    params: &LogFlowParams,
    noise_probe: f64,
    draws: usize,
    rng: &mut R,
) -> AuditReport {
    let visit = state_visitation(params, dag);
    let min_visit_scaled = visit.iter().copied().fold(f64::INFINITY, f64::min) * dag.n_states() as f64;

    let ranks: Vec<TrajectoryRank> = table
        .trajectories
        .iter()
        .enumerate()
        .map(|(index, t)| {
            let rank = matrix_rank(&path_incidence(dag, t));
            TrajectoryRank { index, length: t.len(), rank, ratio: rank as f64 / t.len() as f64 }
        })
        .collect();
    let min_rank_ratio = ranks.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);

    let base: Vec<f64> = params.w().iter().map(|w| w.exp()).collect();
    let draws = draws.max(1);
    // errors[d][e]
    let errors: Vec<Vec<f64>> = (0..draws)
        .map(|_| {
            params
                .w()
                .iter()
                .zip(&base)
                .map(|(w, f0)| {
                    if noise_probe == 0.0 {
                        0.0
                    } else {
                        let xi: f64 = StandardNormal.sample(rng);
                        (w + noise_probe * xi).exp() - f0
                    }
                })
                .collect()
        })
        .collect();
    let n_e = dag.n_edges();
    let mean: Vec<f64> = (0..n_e).map(|e| errors.iter().map(|d| d[e]).sum::<f64>() / draws as f64).collect();
    let cov = |a: usize, b: usize| -> f64 {
        errors.iter().map(|d| (d[a] - mean[a]) * (d[b] - mean[b])).sum::<f64>() / draws as f64
    };
    let max_len = table.trajectories.iter().map(Trajectory::len).max().unwrap_or(0);
    let mut lag_sum = vec![0.0; max_len];
    let mut lag_count = vec![0usize; max_len];
    for t in &table.trajectories {
        let es = t.edges();
        for i in 0..es.len() {
            for j in i..es.len() {
                lag_sum[j - i] += cov(es[i], es[j]);
                lag_count[j - i] += 1;
            }
        }
    }
    let lag_cov: Vec<f64> = lag_sum.iter().zip(&lag_count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let var0 = lag_cov.first().copied().unwrap_or(0.0);
    let lag_correlations: Vec<f64> =
        lag_cov.iter().map(|c| if var0 > 0.0 { c / var0 } else { 0.0 }).collect();
    let fitted_rho = lag_correlations
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, c)| c.max(0.0).powf(1.0 / k as f64))
        .fold(0.0, f64::max)
        .min(1.0 - 1e-12);

    let edge_error_mean =
        errors.iter().map(|d| d.iter().map(|v| v.abs()).sum::<f64>() / n_e as f64).sum::<f64>() / draws as f64;
    let mut xs = Vec::with_capacity(table.count());
    let mut ys = Vec::with_capacity(table.count());
    for t in &table.trajectories {
        let y = errors
            .iter()
            .map(|d| t.edges().iter().map(|&e| d[e] * d[e]).sum::<f64>().sqrt())
            .sum::<f64>()
            / draws as f64;
        xs.push((t.len() as f64).sqrt() * edge_error_mean);
        ys.push(y);
    }
    let error_regression = fit_through_origin(&xs, &ys);

    AuditReport {
        min_visit_scaled,
        ranks,
        min_rank_ratio,
        lag_correlations,
        fitted_rho,
        edge_error_mean,
        error_regression,
    }
}

/// Rows: the states of `traj`; columns: its edges.
pub fn path_incidence(dag: &Dag, traj: &Trajectory) -> DMatrix<f64> {
    let states = traj.states();
    let mut m = DMatrix::zeros(states.len(), traj.len());
    for (c, &e) in traj.edges().iter().enumerate() {
        let (t, h) = dag.edge(e);
        for (r, &s) in states.iter().enumerate() {
            if s == t {
                m[(r, c)] = 1.0;
            } else if s == h {
                m[(r, c)] = -1.0;
            }
        }
    }
    m
}

fn fit_through_origin(xs: &[f64], ys: &[f64]) -> ErrorRegression {
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x).powi(2)).sum();
    let ybar = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - ybar).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    ErrorRegression { slope, r2, n_points: xs.len() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantEstimates {
    /// Largest single-sample stochastic gradient norm seen.
    pub g_est: f64,
    /// `max 1 / P_B(s|s')^2`; the max squared in-degree under uniform `P_B`.
    pub k_theta: f64,
    /// Smallest and largest node flow.
    pub flow_min: f64,
    pub flow_max: f64,
    /// Smallest forward transition probability.
    pub min_transition_prob: f64,
}

pub fn k_theta(dag: &Dag) -> f64 {
    (dag.max_in_degree() as f64).powi(2)
}

/// Empirical theorem constants at `params`. `G` is the max norm over
/// `samples` single-trajectory on-policy gradients of `objective`.
pub fn estimate_constants<R: Rng + ?Sized>(
    params: &LogFlowParams,
    env: &Env,
    objective: Objective,
    samples: usize,
    rng: &mut R,
) -> ConstantEstimates {
    let dag = &env.dag;
    let rewards = env.rewards.per_state();
    let mut g_est: f64 = 0.0;
    for _ in 0..samples {
        let t = sample_forward(params, dag, rng);
        let lg = match objective {
            Objective::Fm => fm_loss_grad_with(params, dag, &rewards, &t.states()[1..]),
            Objective::Db => db_loss_grad_with(params, dag, &rewards, t.edges()),
            Objective::Tb => tb_loss_grad_weighted(params, dag, &rewards, std::slice::from_ref(&t), &[1.0]),
        };
        if let Ok(lg) = lg {
            g_est = g_est.max(lg.grad_norm());
        }
    }
    let flows: Vec<f64> = (0..dag.n_states()).map(|s| node_outflow(params, dag, &env.rewards, s)).collect();
    let min_transition_prob = (0..dag.n_states())
        .filter(|&s| !dag.is_terminal(s))
        .flat_map(|s| softmax_out(params, dag, s))
        .fold(f64::INFINITY, f64::min);
    ConstantEstimates {
        g_est,
        k_theta: k_theta(dag),
        flow_min: flows.iter().copied().fold(f64::INFINITY, f64::min),
        flow_max: flows.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min_transition_prob,
    }
}

/// JSON-serialisable oracle summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub residual: f64,
    pub entropy: f64,
    pub flows: Vec<f64>,
    pub ranks: Vec<TrajectoryRank>,
    pub constants: ConstantEstimates,
}

impl OracleReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Max-entropy solution, trajectory ranks and constants at `params`.
pub fn oracle_report<R: Rng + ?Sized>(
    env: &Env,
    params: &LogFlowParams,
    objective: Objective,
    rng: &mut R,
) -> Result<OracleReport, OracleError> {
    let system = build_incidence(&env.dag, &env.rewards);
    let opts = MaxEntOptions::default();
    let sol = max_entropy_flow(&system, &env.dag, opts.tol, opts.max_iters)?;
    let table = enumerate_trajectories(&env.dag, &env.rewards, DEFAULT_TRAJECTORY_CAP)?;
    let ranks = table
        .trajectories
        .iter()
        .enumerate()
        .map(|(index, t)| {
            let rank = matrix_rank(&path_incidence(&env.dag, t));
            TrajectoryRank { index, length: t.len(), rank, ratio: rank as f64 / t.len() as f64 }
        })
        .collect();
    Ok(OracleReport {
        residual: system.residual_inf(&sol.edge_flows),
        entropy: sol.entropy,
        flows: sol.edge_flows,
        ranks,
        constants: estimate_constants(params, env, objective, 256, rng),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_asym_diamond, build_chain, build_diamond, build_v2};

    #[test]
    fn incidence_of_v2() {
        let env = build_v2(1.0, 3.0).unwrap();
        let sys = build_incidence(&env.dag, &env.rewards);
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        assert_eq!(sys.a, a);
        assert_eq!(sys.b.as_slice(), &[4.0, -1.0, -3.0]);
        assert_eq!(sys.b.sum(), 0.0);

        let chain = build_chain(2, 2.0).unwrap();
        assert_eq!(build_incidence(&chain.dag, &chain.rewards).b.as_slice(), &[2.0, 0.0, -2.0]);
    }

    #[test]
    fn incidence_columns_have_one_plus_one_minus() {
        let env = build_diamond(1.0).unwrap();
        let sys = build_incidence(&env.dag, &env.rewards);
        assert_eq!(sys.a.shape(), (4, 4));
        for c in sys.a.column_iter() {
            assert_eq!(c.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(c.iter().filter(|&&v| v == -1.0).count(), 1);
        }
    }

    #[test]
    fn min_norm_examples() {
        let v2 = build_v2(1.0, 3.0).unwrap();
        let f = min_norm_flow(&build_incidence(&v2.dag, &v2.rewards)).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-12 && (f[1] - 3.0).abs() < 1e-12);

        let chain = build_chain(3, 2.0).unwrap();
        let f = min_norm_flow(&build_incidence(&chain.dag, &chain.rewards)).unwrap();
        assert!(f.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn min_norm_diamond_matches_grid_search() {
        let env = build_diamond(1.0).unwrap();
        let f = min_norm_flow(&build_incidence(&env.dag, &env.rewards)).unwrap();
        // feasible family: (x, 1-x, x, 1-x)
        let best = (0..=10_000)
            .map(|i| i as f64 / 10_000.0)
            .min_by(|a, b| {
                let n = |x: f64| 2.0 * x * x + 2.0 * (1.0 - x) * (1.0 - x);
                n(*a).partial_cmp(&n(*b)).unwrap()
            })
            .unwrap();
        assert!((best - 0.5).abs() < 1e-9);
        for v in f {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn max_entropy_examples() {
        let env = build_diamond(1.0).unwrap();
        let sys = build_incidence(&env.dag, &env.rewards);
        let sol = max_entropy_flow(&sys, &env.dag, 1e-12, 1000).unwrap();
        for v in &sol.edge_flows {
            assert!((v - 0.5).abs() < 1e-10);
        }
        assert!((sol.entropy - 2.0 * 2f64.ln()).abs() < 1e-10);

        let v2 = build_v2(1.0, 3.0).unwrap();
        let sys = build_incidence(&v2.dag, &v2.rewards);
        let sol = max_entropy_flow(&sys, &v2.dag, 1e-12, 1000).unwrap();
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        assert!((sol.entropy - h).abs() < 1e-10);
        assert!((sol.terminal_dist[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn max_entropy_asym_diamond_matches_brute_force() {
        let env = build_asym_diamond(1.0, 1.0).unwrap();
        let sys = build_incidence(&env.dag, &env.rewards);
        let sol = max_entropy_flow(&sys, &env.dag, 1e-12, 1000).unwrap();
        // edges s0a, s0b, at, bt, at2 with R(t)=R(t2)=1, Z=2:
        // a->t2 = 1, a->t = x, b->t = 1-x, s0->a = 1+x, s0->b = 1-x
        let flows = |x: f64| vec![1.0 + x, 1.0 - x, x, 1.0 - x, 1.0];
        let best = (1..1000)
            .map(|i| i as f64 * 1e-3)
            .max_by(|a, b| flow_entropy(&flows(*a), 2.0).partial_cmp(&flow_entropy(&flows(*b), 2.0)).unwrap())
            .unwrap();
        for (got, want) in sol.edge_flows.iter().zip(flows(best)) {
            assert!((got - want).abs() < 5e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn max_entropy_rejects_bad_tol() {
        let env = build_diamond(1.0).unwrap();
        let sys = build_incidence(&env.dag, &env.rewards);
        assert!(matches!(max_entropy_flow(&sys, &env.dag, 0.0, 10), Err(OracleError::InvalidArgument(_))));
        assert!(matches!(
            max_entropy_flow(&build_incidence(&build_asym_diamond(1.0, 5.0).unwrap().dag, &build_asym_diamond(1.0, 5.0).unwrap().rewards), &build_asym_diamond(1.0, 5.0).unwrap().dag, 1e-14, 1),
            Err(OracleError::NonConvergence { iters: 1, .. })
        ));
    }

    #[test]
    fn enumeration_examples() {
        let chain = build_chain(5, 1.0).unwrap();
        assert_eq!(enumerate_trajectories(&chain.dag, &chain.rewards, 10).unwrap().count(), 1);

        let d = build_diamond(1.0).unwrap();
        let table = enumerate_trajectories(&d.dag, &d.rewards, 10).unwrap();
        assert_eq!(table.count(), 2);
        assert_eq!(table.target_probs, vec![0.5, 0.5]);
        assert_eq!(table.trajectories[0].edges(), &[0, 2]);
        assert!(matches!(enumerate_trajectories(&d.dag, &d.rewards, 1), Err(OracleError::ResourceLimit(_))));
    }

    #[test]
    fn discrepancy_examples() {
        let v2 = build_v2(1.0, 3.0).unwrap();
        let table = enumerate_trajectories(&v2.dag, &v2.rewards, 10).unwrap();
        assert_eq!(discrepancy(&table, &table.target_probs.clone()).unwrap(), 1.0);
        assert!((discrepancy(&table, &[0.5, 0.5]).unwrap() - 1.5).abs() < 1e-15);

        let d = build_diamond(1.0).unwrap();
        let table = enumerate_trajectories(&d.dag, &d.rewards, 10).unwrap();
        assert!((discrepancy(&table, &[0.9, 0.1]).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(discrepancy(&table, &[1.0, 0.0]), Err(OracleError::InfiniteDiscrepancy { index: 1 }));
    }

    #[test]
    fn terminal_distribution_examples() {
        let v2 = build_v2(1.0, 3.0).unwrap();
        assert_eq!(exact_terminal_distribution(&v2.rewards), vec![0.25, 0.75]);
        let chain = build_chain(2, 5.0).unwrap();
        assert_eq!(exact_terminal_distribution(&chain.rewards), vec![1.0]);
    }

    #[test]
    fn constants_examples() {
        let chain = build_chain(4, 1.0).unwrap();
        assert_eq!(k_theta(&chain.dag), 1.0);
        let d = build_diamond(1.0).unwrap();
        assert_eq!(k_theta(&d.dag), 4.0);
        let p = LogFlowParams::new(vec![0.0; 4], 0.0).unwrap();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let c = estimate_constants(&p, &d, Objective::Db, 16, &mut rng);
        assert_eq!(c.min_transition_prob, 0.5);
        assert_eq!(c.k_theta, 4.0);
        assert!(c.g_est > 0.0);
    }

    #[test]
    fn backward_uniform_flow_zeroes_db() {
        let env = build_asym_diamond(1.0, 2.0).unwrap();
        let f = backward_uniform_flow(&env.dag, &env.rewards);
        let sys = build_incidence(&env.dag, &env.rewards);
        assert!(sys.residual_inf(&f) < 1e-12);
        let p = LogFlowParams::from_edge_flows(&f, 0.0).unwrap();
        let all: Vec<usize> = (0..env.dag.n_edges()).collect();
        assert!(crate::objectives::db_loss_grad(&p, &env.dag, &env.rewards, &all).unwrap().loss < 1e-28);
    }
}
