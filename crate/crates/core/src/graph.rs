//! Explicit finite DAG environments and their terminal reward tables.
//!
//! A [`Dag`] stores dense state ids, the edge list in construction order and
//! per-state adjacency lists holding edge indices. Edge order is part of the
//! serialized contract because it fixes the layout of every per-edge vector
//! (parameters, gradients, flows).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type StateId = usize;
pub type EdgeId = usize;

/// Default cap on the number of states a generator may produce.
pub const DEFAULT_STATE_CAP: usize = 100_000;
/// Default cap on the longest source-to-terminal path a generator may produce.
pub const DEFAULT_MAX_TRAJECTORY_LEN: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("state {state} out of range (graph has {n_states} states)")]
    StateOutOfRange { state: StateId, n_states: usize },
    #[error("duplicate edge {tail} -> {head}")]
    DuplicateEdge { tail: StateId, head: StateId },
    #[error("cycle detected through edge {tail} -> {head}")]
    Cycle { tail: StateId, head: StateId },
    #[error("source {source_state} has incoming edge from {tail}")]
    SourceHasParents { source_state: StateId, tail: StateId },
    #[error("source {0} has no outgoing edges")]
    SourceIsTerminal(StateId),
    #[error("state {state} is unreachable from the source")]
    Unreachable { state: StateId },
    #[error("terminal {state} has nonpositive reward {value}")]
    NonpositiveReward { state: StateId, value: f64 },
    #[error("terminal {state} has no reward")]
    MissingReward { state: StateId },
    #[error("state {state} carries a reward but is not terminal")]
    RewardOnNonTerminal { state: StateId },
    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),
}

/// Immutable validated DAG with a single source.
///
/// Terminals are exactly the states with out-degree zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Dag {
    n_states: usize,
    source: StateId,
    edges: Vec<(StateId, StateId)>,
    out_adj: Vec<Vec<EdgeId>>,
    in_adj: Vec<Vec<EdgeId>>,
    terminals: Vec<StateId>,
    terminal_index: Vec<Option<usize>>,
    topo: Vec<StateId>,
}

impl Dag {
    /// Builds and validates a DAG. Checks run in a fixed order so each
    /// constructed violation reports a single, predictable error.
    pub fn new(
        n_states: usize,
        source: StateId,
        edges: Vec<(StateId, StateId)>,
    ) -> Result<Self, GraphError> {
        if n_states == 0 {
            return Err(GraphError::InvalidArgument("graph has no states".into()));
        }
        if source >= n_states {
            return Err(GraphError::StateOutOfRange { state: source, n_states });
        }
        let mut out_adj = vec![Vec::new(); n_states];
        let mut in_adj = vec![Vec::new(); n_states];
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        for (e, &(tail, head)) in edges.iter().enumerate() {
            for s in [tail, head] {
                if s >= n_states {
                    return Err(GraphError::StateOutOfRange { state: s, n_states });
                }
            }
            if !seen.insert((tail, head)) {
                return Err(GraphError::DuplicateEdge { tail, head });
            }
            out_adj[tail].push(e);
            in_adj[head].push(e);
        }

        if let Some((tail, head)) = find_back_edge(n_states, source, &edges, &out_adj) {
            return Err(GraphError::Cycle { tail, head });
        }
        if let Some(&e) = in_adj[source].first() {
            return Err(GraphError::SourceHasParents { source_state: source, tail: edges[e].0 });
        }
        if out_adj[source].is_empty() {
            return Err(GraphError::SourceIsTerminal(source));
        }

        let mut reached = vec![false; n_states];
        let mut stack = vec![source];
        reached[source] = true;
        while let Some(s) = stack.pop() {
            for &e in &out_adj[s] {
                let h = edges[e].1;
                if !reached[h] {
                    reached[h] = true;
                    stack.push(h);
                }
            }
        }
        if let Some(state) = reached.iter().position(|r| !r) {
            return Err(GraphError::Unreachable { state });
        }

        let terminals: Vec<StateId> = (0..n_states).filter(|&s| out_adj[s].is_empty()).collect();
        let mut terminal_index = vec![None; n_states];
        for (i, &t) in terminals.iter().enumerate() {
            terminal_index[t] = Some(i);
        }
        let topo = topological_order(n_states, &edges, &out_adj, &in_adj);

        Ok(Self { n_states, source, edges, out_adj, in_adj, terminals, terminal_index, topo })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn source(&self) -> StateId {
        self.source
    }

    pub fn edges(&self) -> &[(StateId, StateId)] {
        &self.edges
    }

    pub fn edge(&self, e: EdgeId) -> (StateId, StateId) {
        self.edges[e]
    }

    pub fn out_edges(&self, s: StateId) -> &[EdgeId] {
        &self.out_adj[s]
    }

    pub fn in_edges(&self, s: StateId) -> &[EdgeId] {
        &self.in_adj[s]
    }

    pub fn terminals(&self) -> &[StateId] {
        &self.terminals
    }

    pub fn n_terminals(&self) -> usize {
        self.terminals.len()
    }

    pub fn is_terminal(&self, s: StateId) -> bool {
        self.terminal_index[s].is_some()
    }

    /// Position of `s` in [`Dag::terminals`], if terminal.
    pub fn terminal_index(&self, s: StateId) -> Option<usize> {
        self.terminal_index[s]
    }

    /// States in a topological order (ties broken by id).
    pub fn topological_order(&self) -> &[StateId] {
        &self.topo
    }

    pub fn max_in_degree(&self) -> usize {
        self.in_adj.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Number of edges on the longest source-to-terminal path.
    pub fn max_trajectory_len(&self) -> usize {
        let mut depth = vec![0usize; self.n_states];
        for &s in &self.topo {
            for &e in &self.out_adj[s] {
                let h = self.edges[e].1;
                depth[h] = depth[h].max(depth[s] + 1);
            }
        }
        self.terminals.iter().map(|&t| depth[t]).max().unwrap_or(0)
    }

    /// Edge index of `tail -> head`, if present.
    pub fn find_edge(&self, tail: StateId, head: StateId) -> Option<EdgeId> {
        self.out_adj.get(tail)?.iter().copied().find(|&e| self.edges[e].1 == head)
    }
}

/// Iterative DFS from the source first, then every other state. Returns the
/// first back edge found.
fn find_back_edge(
    n: usize,
    source: StateId,
    edges: &[(StateId, StateId)],
    out_adj: &[Vec<EdgeId>],
) -> Option<(StateId, StateId)> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark = vec![Mark::New; n];
    let roots = std::iter::once(source).chain((0..n).filter(|&s| s != source));
    for root in roots {
        if mark[root] != Mark::New {
            continue;
        }
        let mut stack: Vec<(StateId, usize)> = vec![(root, 0)];
        mark[root] = Mark::Open;
        while let Some(top) = stack.last_mut() {
            let (s, next) = *top;
            if next < out_adj[s].len() {
                top.1 += 1;
                let e = out_adj[s][next];
                let h = edges[e].1;
                match mark[h] {
                    Mark::Open => return Some(edges[e]),
                    Mark::New => {
                        mark[h] = Mark::Open;
                        stack.push((h, 0));
                    }
                    Mark::Done => {}
                }
            } else {
                mark[s] = Mark::Done;
                stack.pop();
            }
        }
    }
    None
}

fn topological_order(
    n: usize,
    edges: &[(StateId, StateId)],
    out_adj: &[Vec<EdgeId>],
    in_adj: &[Vec<EdgeId>],
) -> Vec<StateId> {
    let mut indeg: Vec<usize> = in_adj.iter().map(Vec::len).collect();
    let mut ready: std::collections::BinaryHeap<std::cmp::Reverse<StateId>> =
        (0..n).filter(|&s| indeg[s] == 0).map(std::cmp::Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(std::cmp::Reverse(s)) = ready.pop() {
        order.push(s);
        for &e in &out_adj[s] {
            let h = edges[e].1;
            indeg[h] -= 1;
            if indeg[h] == 0 {
                ready.push(std::cmp::Reverse(h));
            }
        }
    }
    order
}

/// Strictly positive rewards on the terminals of a companion [`Dag`].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTable {
    terminals: Vec<StateId>,
    values: Vec<f64>,
    slot: Vec<Option<usize>>,
    r_min: f64,
    z_r: f64,
}

impl RewardTable {
    pub fn new(dag: &Dag, rewards: &BTreeMap<StateId, f64>) -> Result<Self, GraphError> {
        for &s in rewards.keys() {
            if s >= dag.n_states() {
                return Err(GraphError::StateOutOfRange { state: s, n_states: dag.n_states() });
            }
            if !dag.is_terminal(s) {
                return Err(GraphError::RewardOnNonTerminal { state: s });
            }
        }
        let mut values = Vec::with_capacity(dag.n_terminals());
        for &t in dag.terminals() {
            let v = *rewards.get(&t).ok_or(GraphError::MissingReward { state: t })?;
            check_reward(t, v)?;
            values.push(v);
        }
        Ok(Self::from_parts(dag.terminals().to_vec(), values, dag.n_states()))
    }

    /// Rewards listed in terminal order.
    pub fn from_values(dag: &Dag, values: Vec<f64>) -> Result<Self, GraphError> {
        if values.len() != dag.n_terminals() {
            return Err(GraphError::InvalidArgument(format!(
                "expected {} rewards, got {}",
                dag.n_terminals(),
                values.len()
            )));
        }
        for (&t, &v) in dag.terminals().iter().zip(&values) {
            check_reward(t, v)?;
        }
        Ok(Self::from_parts(dag.terminals().to_vec(), values, dag.n_states()))
    }

    fn from_parts(terminals: Vec<StateId>, values: Vec<f64>, n_states: usize) -> Self {
        let mut slot = vec![None; n_states];
        for (i, &t) in terminals.iter().enumerate() {
            slot[t] = Some(i);
        }
        let mut table = Self { terminals, values, slot, r_min: 0.0, z_r: 0.0 };
        table.refresh();
        table
    }

    fn refresh(&mut self) {
        self.r_min = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        self.z_r = self.values.iter().sum();
    }

    /// Replaces the reward of terminal `state`; cached statistics follow.
    pub fn set(&mut self, state: StateId, value: f64) -> Result<(), GraphError> {
        let i = self
            .slot
            .get(state)
            .copied()
            .flatten()
            .ok_or(GraphError::RewardOnNonTerminal { state })?;
        check_reward(state, value)?;
        self.values[i] = value;
        self.refresh();
        Ok(())
    }

    /// Reward of a terminal state, `None` for non-terminals.
    pub fn get(&self, state: StateId) -> Option<f64> {
        self.slot.get(state).copied().flatten().map(|i| self.values[i])
    }

    /// Rewards in terminal order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn terminals(&self) -> &[StateId] {
        &self.terminals
    }

    pub fn r_min(&self) -> f64 {
        self.r_min
    }

    pub fn z_r(&self) -> f64 {
        self.z_r
    }

    /// Dense per-state vector: the reward at terminals, zero elsewhere.
    pub fn per_state(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.slot.len()];
        for (&t, &v) in self.terminals.iter().zip(&self.values) {
            out[t] = v;
        }
        out
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, GraphError> {
        let values: Vec<f64> = self.values.iter().map(|v| v * factor).collect();
        for (&t, &v) in self.terminals.iter().zip(&values) {
            check_reward(t, v)?;
        }
        Ok(Self::from_parts(self.terminals.clone(), values, self.slot.len()))
    }
}

fn check_reward(state: StateId, value: f64) -> Result<(), GraphError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(GraphError::NonpositiveReward { state, value })
    }
}

/// A DAG together with its reward table.
#[derive(Debug, Clone, PartialEq)]
pub struct Env {
    pub dag: Dag,
    pub rewards: RewardTable,
}

impl Env {
    pub fn new(dag: Dag, rewards: RewardTable) -> Self {
        Self { dag, rewards }
    }

    fn from_edges(
        n_states: usize,
        edges: Vec<(StateId, StateId)>,
        rewards: &[(StateId, f64)],
    ) -> Result<Self, GraphError> {
        let dag = Dag::new(n_states, 0, edges)?;
        let map: BTreeMap<StateId, f64> = rewards.iter().copied().collect();
        let rewards = RewardTable::new(&dag, &map)?;
        Ok(Self { dag, rewards })
    }
}

/// `s0 -> s1 -> ... -> s_L`, one terminal carrying `reward`.
pub fn build_chain(length: usize, reward: f64) -> Result<Env, GraphError> {
    if length == 0 {
        return Err(GraphError::InvalidArgument("chain length must be at least 1".into()));
    }
    let edges = (0..length).map(|i| (i, i + 1)).collect();
    Env::from_edges(length + 1, edges, &[(length, reward)])
}

/// Source with two terminal children, rewards `r1` and `r2`.
pub fn build_v2(r1: f64, r2: f64) -> Result<Env, GraphError> {
    Env::from_edges(3, vec![(0, 1), (0, 2)], &[(1, r1), (2, r2)])
}

/// `s0 -> a, s0 -> b, a -> t, b -> t` with states `(s0, a, b, t) = (0, 1, 2, 3)`.
pub fn build_diamond(reward: f64) -> Result<Env, GraphError> {
    Env::from_edges(4, vec![(0, 1), (0, 2), (1, 3), (2, 3)], &[(3, reward)])
}

/// Diamond with an extra terminal hanging off `a`: edges
/// `s0->a, s0->b, a->t, b->t, a->t2`. One free flow coordinate remains.
pub fn build_asym_diamond(r_t: f64, r_t2: f64) -> Result<Env, GraphError> {
    Env::from_edges(
        5,
        vec![(0, 1), (0, 2), (1, 3), (2, 3), (1, 4)],
        &[(3, r_t), (4, r_t2)],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridReward {
    Uniform,
    Corner,
    Center,
}

impl std::str::FromStr for GridReward {
    type Err = GraphError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "corner" => Ok(Self::Corner),
            "center" => Ok(Self::Center),
            other => Err(GraphError::InvalidArgument(format!("unknown grid reward '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GridLimits {
    pub state_cap: usize,
    pub max_trajectory_len: usize,
}

impl Default for GridLimits {
    fn default() -> Self {
        Self { state_cap: DEFAULT_STATE_CAP, max_trajectory_len: DEFAULT_MAX_TRAJECTORY_LEN }
    }
}

pub fn build_grid(dimension: usize, side: usize, reward: GridReward) -> Result<Env, GraphError> {
    build_grid_with_limits(dimension, side, reward, GridLimits::default())
}

/// Hypergrid over `{0..side-1}^dimension`. Lattice point `x` has id equal to
/// its mixed-radix index; its stop terminal `x̂` has id `side^dimension + id(x)`.
/// Edges are listed per lattice point: coordinate increments by axis, then
/// the stop edge.
pub fn build_grid_with_limits(
    dimension: usize,
    side: usize,
    reward: GridReward,
    limits: GridLimits,
) -> Result<Env, GraphError> {
    if dimension == 0 || side == 0 {
        return Err(GraphError::InvalidArgument("grid dimension and side must be positive".into()));
    }
    let max_len = dimension.checked_mul(side - 1);
    if max_len.map_or(true, |l| l + 1 > limits.max_trajectory_len) {
        return Err(GraphError::ResourceLimit(format!(
            "grid trajectories exceed the maximum length {}",
            limits.max_trajectory_len
        )));
    }
    let lattice = (0..dimension)
        .try_fold(1usize, |acc, _| acc.checked_mul(side))
        .filter(|&n| n.checked_mul(2).is_some_and(|s| s <= limits.state_cap))
        .ok_or_else(|| {
            GraphError::ResourceLimit(format!("grid exceeds the state cap {}", limits.state_cap))
        })?;

    let mut edges = Vec::new();
    let mut rewards = Vec::with_capacity(lattice);
    let mut coords = vec![0usize; dimension];
    let mut strides = vec![1usize; dimension];
    for axis in (0..dimension.saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * side;
    }
    for id in 0..lattice {
        let mut rem = id;
        for c in coords.iter_mut().rev() {
            *c = rem % side;
            rem /= side;
        }
        for axis in 0..dimension {
            if coords[axis] + 1 < side {
                edges.push((id, id + strides[axis]));
            }
        }
        edges.push((id, lattice + id));
        let r = match reward {
            GridReward::Uniform => 1.0,
            GridReward::Corner => {
                0.1 + 2.0 * f64::from(u8::from(coords.iter().all(|&c| c == side - 1)))
            }
            GridReward::Center => {
                let centered = coords.iter().all(|&c| (2 * c).abs_diff(side - 1) <= 1);
                0.1 + 2.0 * f64::from(u8::from(centered))
            }
        };
        rewards.push((lattice + id, r));
    }
    Env::from_edges(2 * lattice, edges, &rewards)
}

/// Layered random DAG: `layers` hidden layers of `width` states, each state
/// wired to `fan_out` distinct states of the next layer, last layer wired to
/// `width` terminals. Rewards drawn uniformly from `[r_lo, r_hi]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LayeredConfig {
    pub layers: usize,
    pub width: usize,
    pub fan_out: usize,
    pub r_lo: f64,
    pub r_hi: f64,
}

pub fn build_random_layered<R: Rng + ?Sized>(
    config: &LayeredConfig,
    rng: &mut R,
) -> Result<Env, GraphError> {
    let LayeredConfig { layers, width, fan_out, r_lo, r_hi } = *config;
    if layers == 0 || width == 0 || fan_out == 0 || fan_out > width {
        return Err(GraphError::InvalidArgument(
            "layered config needs layers, width >= 1 and 1 <= fan_out <= width".into(),
        ));
    }
    if !(r_lo > 0.0 && r_hi >= r_lo) {
        return Err(GraphError::InvalidArgument("reward range must be positive".into()));
    }
    let layer_start = |l: usize| 1 + l * width;
    let n_states = 1 + (layers + 1) * width;
    let mut edges: Vec<(StateId, StateId)> = (0..width).map(|j| (0, layer_start(0) + j)).collect();
    for l in 0..layers {
        let mut hit = vec![false; width];
        for j in 0..width {
            let picks = rand::seq::index::sample(rng, width, fan_out);
            let mut heads: Vec<usize> = picks.into_iter().collect();
            heads.sort_unstable();
            for k in heads {
                hit[k] = true;
                edges.push((layer_start(l) + j, layer_start(l + 1) + k));
            }
        }
        // every next-layer state needs a parent
        for (k, h) in hit.iter().enumerate() {
            if !h {
                let j = rng.random_range(0..width);
                edges.push((layer_start(l) + j, layer_start(l + 1) + k));
            }
        }
    }
    let rewards: Vec<(StateId, f64)> = (0..width)
        .map(|k| (layer_start(layers) + k, rng.random_range(r_lo..=r_hi)))
        .collect();
    Env::from_edges(n_states, edges, &rewards)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DagFile {
    states: usize,
    source: StateId,
    edges: Vec<[StateId; 2]>,
    rewards: BTreeMap<String, f64>,
}

/// Parses the JSON DAG schema and validates the result.
pub fn parse_dag(text: &str) -> Result<Env, GraphError> {
    let file: DagFile = serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
    let edges = file.edges.iter().map(|&[t, h]| (t, h)).collect();
    let dag = Dag::new(file.states, file.source, edges)?;
    let mut map = BTreeMap::new();
    for (key, value) in &file.rewards {
        let id: StateId = key
            .parse()
            .map_err(|_| GraphError::Parse(format!("reward key '{key}' is not a state id")))?;
        map.insert(id, *value);
    }
    let rewards = RewardTable::new(&dag, &map)?;
    Ok(Env { dag, rewards })
}

pub fn load_dag(path: impl AsRef<Path>) -> Result<Env, GraphError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| GraphError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_dag(&text)
}

pub fn dag_to_json(env: &Env) -> String {
    let file = DagFile {
        states: env.dag.n_states(),
        source: env.dag.source(),
        edges: env.dag.edges().iter().map(|&(t, h)| [t, h]).collect(),
        rewards: env
            .rewards
            .terminals()
            .iter()
            .zip(env.rewards.values())
            .map(|(t, v)| (t.to_string(), *v))
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("DAG file serialization cannot fail")
}

pub fn save_dag(env: &Env, path: impl AsRef<Path>) -> Result<(), GraphError> {
    let path = path.as_ref();
    fs::write(path, dag_to_json(env))
        .map_err(|e| GraphError::Io { path: path.display().to_string(), message: e.to_string() })
}
