//! Tabular log-flow parameters and the policies and samplers they induce.
//!
//! Edge flows are `exp(w[e])`. The forward policy at a state is the softmax
//! of `w` over its outgoing edges; the backward policy is fixed uniform over
//! parents. Terminal node flow is the terminal's reward.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Dag, EdgeId, RewardTable, StateId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite parameter value at index {index}")]
    NonFinite { index: usize },
    #[error("parameter vector has {got} edge entries, graph has {expected} edges")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("snapshot parse error: {0}")]
    Parse(String),
}

/// Initial value of the per-edge log flows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    /// All `w = 0`, i.e. uniform forward policies.
    Zero,
    /// iid uniform draws in `[-half_width, half_width]`.
    Uniform { half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub w: InitScheme,
    /// `None` starts `zeta` at `ln Z_R`.
    pub zeta: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { w: InitScheme::Zero, zeta: None }
    }
}

/// Log edge flows `w` (one per edge, in edge order) plus the log partition `zeta`.
///
/// Entries are finite at all times; [`LogFlowParams::apply_step`] refuses an
/// update that would break that.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFlowParams {
    w: Vec<f64>,
    zeta: f64,
}

impl LogFlowParams {
    pub fn new(w: Vec<f64>, zeta: f64) -> Result<Self, ModelError> {
        if let Some(index) = w.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
        if !zeta.is_finite() {
            return Err(ModelError::NonFinite { index: w.len() });
        }
        Ok(Self { w, zeta })
    }

    pub fn for_dag(dag: &Dag, w: Vec<f64>, zeta: f64) -> Result<Self, ModelError> {
        if w.len() != dag.n_edges() {
            return Err(ModelError::LengthMismatch { expected: dag.n_edges(), got: w.len() });
        }
        Self::new(w, zeta)
    }

    pub fn init<R: Rng + ?Sized>(
        dag: &Dag,
        rewards: &RewardTable,
        config: &InitConfig,
        rng: &mut R,
    ) -> Self {
        let w = match config.w {
            InitScheme::Zero => vec![0.0; dag.n_edges()],
            InitScheme::Uniform { half_width } => (0..dag.n_edges())
                .map(|_| if half_width > 0.0 { rng.random_range(-half_width..=half_width) } else { 0.0 })
                .collect(),
        };
        let zeta = config.zeta.unwrap_or_else(|| rewards.z_r().ln());
        Self { w, zeta }
    }

    /// Log of a given positive flow vector.
    pub fn from_edge_flows(flows: &[f64], zeta: f64) -> Result<Self, ModelError> {
        if let Some(index) = flows.iter().position(|&f| !(f > 0.0)) {
            return Err(ModelError::InvalidArgument(format!(
                "edge flow {index} is not strictly positive"
            )));
        }
        Self::new(flows.iter().map(|f| f.ln()).collect(), zeta)
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    pub fn n_edges(&self) -> usize {
        self.w.len()
    }

    pub fn set_zeta(&mut self, zeta: f64) -> Result<(), ModelError> {
        if !zeta.is_finite() {
            return Err(ModelError::NonFinite { index: self.w.len() });
        }
        self.zeta = zeta;
        Ok(())
    }

    /// `w -= lr * grad_w`, `zeta -= lr * grad_zeta`, all or nothing.
    pub fn apply_step(&mut self, lr: f64, grad_w: &[f64], grad_zeta: f64) -> Result<(), ModelError> {
        if grad_w.len() != self.w.len() {
            return Err(ModelError::LengthMismatch { expected: self.w.len(), got: grad_w.len() });
        }
        let next: Vec<f64> = self.w.iter().zip(grad_w).map(|(w, g)| w - lr * g).collect();
        let zeta = self.zeta - lr * grad_zeta;
        if let Some(index) = next.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { index });
        }
        if !zeta.is_finite() {
            return Err(ModelError::NonFinite { index: next.len() });
        }
        self.w = next;
        self.zeta = zeta;
        Ok(())
    }

    /// Flat vector `[w..., zeta]`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.push(self.zeta);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, ModelError> {
        let (zeta, w) = flat
            .split_last()
            .ok_or_else(|| ModelError::Parse("snapshot is empty".into()))?;
        Self::new(w.to_vec(), *zeta)
    }
}

/// `exp(w[edge])`.
pub fn edge_flow(params: &LogFlowParams, edge: EdgeId) -> f64 {
    params.w[edge].exp()
}

/// All edge flows `exp(w)`.
pub fn edge_flows(params: &LogFlowParams) -> Vec<f64> {
    params.w.iter().map(|w| w.exp()).collect()
}

/// Total outgoing flow of `state`; the reward for a terminal.
pub fn node_outflow(params: &LogFlowParams, dag: &Dag, rewards: &RewardTable, state: StateId) -> f64 {
    if dag.is_terminal(state) {
        rewards.get(state).expect("reward table matches the dag")
    } else {
        dag.out_edges(state).iter().map(|&e| params.w[e].exp()).sum()
    }
}

/// Softmax of `w` restricted to the outgoing edges of `state`, in adjacency order.
pub fn forward_policy(params: &LogFlowParams, dag: &Dag, state: StateId) -> Result<Vec<f64>, ModelError> {
    if state >= dag.n_states() {
        return Err(ModelError::InvalidArgument(format!("state {state} out of range")));
    }
    if dag.is_terminal(state) {
        return Err(ModelError::InvalidArgument(format!("state {state} is terminal")));
    }
    Ok(softmax_out(params, dag, state))
}

pub(crate) fn softmax_out(params: &LogFlowParams, dag: &Dag, state: StateId) -> Vec<f64> {
    let out = dag.out_edges(state);
    let max = out.iter().map(|&e| params.w[e]).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = out.iter().map(|&e| (params.w[e] - max).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    p
}

/// `log sum exp` of `w` over the outgoing edges of a non-terminal state.
pub(crate) fn log_outflow(params: &LogFlowParams, dag: &Dag, state: StateId) -> f64 {
    let out = dag.out_edges(state);
    let max = out.iter().map(|&e| params.w[e]).fold(f64::NEG_INFINITY, f64::max);
    max + out.iter().map(|&e| (params.w[e] - max).exp()).sum::<f64>().ln()
}

/// Uniform distribution over the incoming edges of `state`.
pub fn backward_policy_uniform(dag: &Dag, state: StateId) -> Result<Vec<f64>, ModelError> {
    if state >= dag.n_states() {
        return Err(ModelError::InvalidArgument(format!("state {state} out of range")));
    }
    if state == dag.source() {
        return Err(ModelError::InvalidArgument("the source has no parents".into()));
    }
    let k = dag.in_edges(state).len();
    Ok(vec![1.0 / k as f64; k])
}

/// A source-to-terminal path.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<StateId>,
    edges: Vec<EdgeId>,
}

impl Trajectory {
    /// Builds a trajectory from its edge list, checking it is a complete path.
    pub fn from_edges(dag: &Dag, edges: Vec<EdgeId>) -> Result<Self, ModelError> {
        let mut states = vec![dag.source()];
        for &e in &edges {
            if e >= dag.n_edges() {
                return Err(ModelError::InvalidTrajectory(format!("edge {e} out of range")));
            }
            let (tail, head) = dag.edge(e);
            if tail != *states.last().unwrap() {
                return Err(ModelError::InvalidTrajectory(format!(
                    "edge {e} does not leave state {}",
                    states.last().unwrap()
                )));
            }
            states.push(head);
        }
        if !dag.is_terminal(*states.last().unwrap()) {
            return Err(ModelError::InvalidTrajectory("path does not end at a terminal".into()));
        }
        Ok(Self { states, edges })
    }

    pub(crate) fn from_parts_unchecked(states: Vec<StateId>, edges: Vec<EdgeId>) -> Self {
        Self { states, edges }
    }

    /// Re-checks this trajectory against `dag`.
    pub fn validate(&self, dag: &Dag) -> Result<(), ModelError> {
        let rebuilt = Self::from_edges(dag, self.edges.clone())?;
        if rebuilt.states != self.states {
            return Err(ModelError::InvalidTrajectory("state list does not match edges".into()));
        }
        Ok(())
    }

    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn terminal(&self) -> StateId {
        *self.states.last().expect("trajectories are never empty")
    }
}

fn pick<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// On-policy sample: follow the forward policy from the source.
pub fn sample_forward<R: Rng + ?Sized>(params: &LogFlowParams, dag: &Dag, rng: &mut R) -> Trajectory {
    let mut s = dag.source();
    let mut states = vec![s];
    let mut edges = Vec::new();
    while !dag.is_terminal(s) {
        let probs = softmax_out(params, dag, s);
        let e = dag.out_edges(s)[pick(&probs, rng)];
        edges.push(e);
        s = dag.edge(e).1;
        states.push(s);
    }
    Trajectory { states, edges }
}

/// Terminal drawn proportional to reward, then uniform parents back to the
/// source. Returned in forward order.
pub fn sample_backward<R: Rng + ?Sized>(dag: &Dag, rewards: &RewardTable, rng: &mut R) -> Trajectory {
    let z = rewards.z_r();
    let probs: Vec<f64> = rewards.values().iter().map(|r| r / z).collect();
    let mut s = rewards.terminals()[pick(&probs, rng)];
    let mut states = vec![s];
    let mut edges = Vec::new();
    while s != dag.source() {
        let parents = dag.in_edges(s);
        let e = parents[rng.random_range(0..parents.len())];
        edges.push(e);
        s = dag.edge(e).0;
        states.push(s);
    }
    states.reverse();
    edges.reverse();
    Trajectory { states, edges }
}

/// `log P_F(traj)` as a sum of log-softmax steps.
pub fn trajectory_logprob(params: &LogFlowParams, dag: &Dag, traj: &Trajectory) -> Result<f64, ModelError> {
    traj.validate(dag)?;
    Ok(logprob_unchecked(params, dag, traj))
}

pub(crate) fn logprob_unchecked(params: &LogFlowParams, dag: &Dag, traj: &Trajectory) -> f64 {
    traj.edges
        .iter()
        .zip(&traj.states)
        .map(|(&e, &s)| params.w[e] - log_outflow(params, dag, s))
        .sum()
}

/// `log P_B(traj | terminal)` under the uniform backward policy.
pub fn backward_logprob(dag: &Dag, traj: &Trajectory) -> f64 {
    traj.states[1..].iter().map(|&s| -(dag.in_edges(s).len() as f64).ln()).sum()
}

/// Probability that a forward rollout visits each state.
pub fn state_visitation(params: &LogFlowParams, dag: &Dag) -> Vec<f64> {
    let mut visit = vec![0.0; dag.n_states()];
    visit[dag.source()] = 1.0;
    for &s in dag.topological_order() {
        if dag.is_terminal(s) || visit[s] == 0.0 {
            continue;
        }
        let probs = softmax_out(params, dag, s);
        for (&e, p) in dag.out_edges(s).iter().zip(probs) {
            visit[dag.edge(e).1] += visit[s] * p;
        }
    }
    visit
}

/// Probability that a forward rollout crosses each edge.
pub fn edge_visitation(params: &LogFlowParams, dag: &Dag) -> Vec<f64> {
    let visit = state_visitation(params, dag);
    let mut out = vec![0.0; dag.n_edges()];
    for s in 0..dag.n_states() {
        if dag.is_terminal(s) {
            continue;
        }
        for (&e, p) in dag.out_edges(s).iter().zip(softmax_out(params, dag, s)) {
            out[e] = visit[s] * p;
        }
    }
    out
}

/// Terminal distribution of the forward policy, in terminal order.
pub fn terminal_distribution(params: &LogFlowParams, dag: &Dag) -> Vec<f64> {
    let visit = state_visitation(params, dag);
    dag.terminals().iter().map(|&t| visit[t]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotFormat {
    Json,
    Binary,
}

impl std::str::FromStr for SnapshotFormat {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "binary" | "bin" => Ok(Self::Binary),
            other => Err(ModelError::InvalidArgument(format!("unknown snapshot format '{other}'"))),
        }
    }
}

/// JSON array `[w..., zeta]`, or the same values as little-endian `f64`s.
pub fn encode_snapshot(params: &LogFlowParams, format: SnapshotFormat) -> Vec<u8> {
    let flat = params.to_flat();
    match format {
        SnapshotFormat::Json => serde_json::to_vec(&flat).expect("f64 arrays serialize"),
        SnapshotFormat::Binary => flat.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

pub fn decode_snapshot(bytes: &[u8], format: SnapshotFormat) -> Result<LogFlowParams, ModelError> {
    let flat: Vec<f64> = match format {
        SnapshotFormat::Json => {
            serde_json::from_slice(bytes).map_err(|e| ModelError::Parse(e.to_string()))?
        }
        SnapshotFormat::Binary => {
            if bytes.len() % 8 != 0 {
                return Err(ModelError::Parse(format!(
                    "binary snapshot length {} is not a multiple of 8",
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect()
        }
    };
    LogFlowParams::from_flat(&flat)
}

pub fn save_snapshot(params: &LogFlowParams, path: impl AsRef<Path>, format: SnapshotFormat) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, encode_snapshot(params, format))
        .map_err(|e| ModelError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_snapshot(path: impl AsRef<Path>, format: SnapshotFormat) -> Result<LogFlowParams, ModelError> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| ModelError::Io { path: path.display().to_string(), message: e.to_string() })?;
    decode_snapshot(&bytes, format)
}
