//! Flow-matching, detailed-balance and trajectory-balance losses with exact
//! gradients in the tabular parameters.
//!
//! All losses are batch means. Reward inputs come as a dense per-state slice
//! (reward at terminals, ignored elsewhere) so callers can substitute noisy
//! effective rewards without building a new [`RewardTable`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow_model::{backward_logprob, log_outflow, logprob_unchecked, softmax_out, LogFlowParams, Trajectory};
use crate::graph::{Dag, EdgeId, RewardTable, StateId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch contains the source state {0}")]
    SourceInBatch(StateId),
    #[error("state {0} out of range")]
    InvalidState(StateId),
    #[error("edge {0} out of range")]
    InvalidEdge(EdgeId),
    #[error("terminal {state} has nonpositive effective reward {value}")]
    NonpositiveReward { state: StateId, value: f64 },
    #[error("invalid trajectory at batch index {0}")]
    InvalidTrajectory(usize),
    #[error("{weights} weights for {items} batch items")]
    WeightMismatch { weights: usize, items: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Fm,
    Db,
    Tb,
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fm" => Ok(Self::Fm),
            "db" => Ok(Self::Db),
            "tb" => Ok(Self::Tb),
            other => Err(format!("unknown objective '{other}'")),
        }
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fm => "fm",
            Self::Db => "db",
            Self::Tb => "tb",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    /// Zero for FM and DB.
    pub grad_zeta: f64,
}

impl LossGrad {
    fn zero(n_edges: usize) -> Self {
        Self { loss: 0.0, grad_w: vec![0.0; n_edges], grad_zeta: 0.0 }
    }

    pub fn grad_norm_sq(&self) -> f64 {
        self.grad_w.iter().map(|g| g * g).sum::<f64>() + self.grad_zeta * self.grad_zeta
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad_norm_sq().sqrt()
    }
}

/// Conservation residual of a non-source state: inflow minus outflow, with
/// the outflow of a terminal replaced by its reward.
pub fn fm_residual(params: &LogFlowParams, dag: &Dag, state_rewards: &[f64], s: StateId) -> f64 {
    let w = params.w();
    let inflow: f64 = dag.in_edges(s).iter().map(|&e| w[e].exp()).sum();
    if dag.is_terminal(s) {
        inflow - state_rewards[s]
    } else {
        inflow - dag.out_edges(s).iter().map(|&e| w[e].exp()).sum::<f64>()
    }
}

pub fn fm_loss_grad(
    params: &LogFlowParams,
    dag: &Dag,
    rewards: &RewardTable,
    states: &[StateId],
) -> Result<LossGrad, ObjectiveError> {
    fm_loss_grad_with(params, dag, &rewards.per_state(), states)
}

pub fn fm_loss_grad_with(
    params: &LogFlowParams,
    dag: &Dag,
    state_rewards: &[f64],
    states: &[StateId],
) -> Result<LossGrad, ObjectiveError> {
    if states.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    for &s in states {
        if s >= dag.n_states() {
            return Err(ObjectiveError::InvalidState(s));
        }
        if s == dag.source() {
            return Err(ObjectiveError::SourceInBatch(s));
        }
    }
    let w = params.w();
    let scale = 1.0 / states.len() as f64;
    let mut out = LossGrad::zero(dag.n_edges());
    for &s in states {
        let r = fm_residual(params, dag, state_rewards, s);
        out.loss += scale * r * r;
        let coef = 2.0 * scale * r;
        for &e in dag.in_edges(s) {
            out.grad_w[e] += coef * w[e].exp();
        }
        if !dag.is_terminal(s) {
            for &e in dag.out_edges(s) {
                out.grad_w[e] -= coef * w[e].exp();
            }
        }
    }
    Ok(out)
}

/// Detailed-balance ratio `F(s->s') / (F(s') P_B(s|s'))` for edge `e`.
pub fn db_ratio(params: &LogFlowParams, dag: &Dag, state_rewards: &[f64], e: EdgeId) -> f64 {
    let (_, head) = dag.edge(e);
    let indeg = dag.in_edges(head).len() as f64;
    let log_head = if dag.is_terminal(head) {
        state_rewards[head].ln()
    } else {
        log_outflow(params, dag, head)
    };
    (params.w()[e] - log_head).exp() * indeg
}

pub fn db_loss_grad(
    params: &LogFlowParams,
    dag: &Dag,
    rewards: &RewardTable,
    transitions: &[EdgeId],
) -> Result<LossGrad, ObjectiveError> {
    db_loss_grad_with(params, dag, &rewards.per_state(), transitions)
}

pub fn db_loss_grad_with(
    params: &LogFlowParams,
    dag: &Dag,
    state_rewards: &[f64],
    transitions: &[EdgeId],
) -> Result<LossGrad, ObjectiveError> {
    if transitions.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    for &e in transitions {
        if e >= dag.n_edges() {
            return Err(ObjectiveError::InvalidEdge(e));
        }
        let head = dag.edge(e).1;
        if head == dag.source() {
            return Err(ObjectiveError::SourceInBatch(head));
        }
        if dag.is_terminal(head) && !(state_rewards[head] > 0.0) {
            return Err(ObjectiveError::NonpositiveReward { state: head, value: state_rewards[head] });
        }
    }
    let scale = 1.0 / transitions.len() as f64;
    let mut out = LossGrad::zero(dag.n_edges());
    for &e in transitions {
        let head = dag.edge(e).1;
        let ratio = db_ratio(params, dag, state_rewards, e);
        let d = ratio - 1.0;
        out.loss += scale * d * d;
        let coef = 2.0 * scale * d * ratio;
        out.grad_w[e] += coef;
        if !dag.is_terminal(head) {
            // d ratio / d w_k = -ratio * P_F(k | head) for k leaving the head
            for (&k, p) in dag.out_edges(head).iter().zip(softmax_out(params, dag, head)) {
                out.grad_w[k] -= coef * p;
            }
        }
    }
    Ok(out)
}

/// Trajectory-balance log ratio `zeta + log P_F(tau) - log R(x) - log P_B(tau|x)`.
///
/// The backward term is the fixed uniform-parent policy; it is zero on
/// trees, where every terminal has a single path.
pub fn tb_log_ratio(params: &LogFlowParams, dag: &Dag, reward: f64, traj: &Trajectory) -> f64 {
    params.zeta() + logprob_unchecked(params, dag, traj) - reward.ln() - backward_logprob(dag, traj)
}

pub fn tb_loss_grad(
    params: &LogFlowParams,
    dag: &Dag,
    rewards: &RewardTable,
    trajs: &[Trajectory],
) -> Result<LossGrad, ObjectiveError> {
    let weights = vec![1.0 / trajs.len().max(1) as f64; trajs.len()];
    tb_loss_grad_weighted(params, dag, &rewards.per_state(), trajs, &weights)
}

/// Weighted TB loss `sum_i weights[i] * (r_i - 1)^2`. Weights are treated
/// as constants; uniform weights give the batch mean.
pub fn tb_loss_grad_weighted(
    params: &LogFlowParams,
    dag: &Dag,
    state_rewards: &[f64],
    trajs: &[Trajectory],
    weights: &[f64],
) -> Result<LossGrad, ObjectiveError> {
    if trajs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if weights.len() != trajs.len() {
        return Err(ObjectiveError::WeightMismatch { weights: weights.len(), items: trajs.len() });
    }
    for (i, t) in trajs.iter().enumerate() {
        if t.validate(dag).is_err() {
            return Err(ObjectiveError::InvalidTrajectory(i));
        }
        let x = t.terminal();
        if !(state_rewards[x] > 0.0) {
            return Err(ObjectiveError::NonpositiveReward { state: x, value: state_rewards[x] });
        }
    }
    let mut out = LossGrad::zero(dag.n_edges());
    for (t, &wt) in trajs.iter().zip(weights) {
        let ratio = tb_log_ratio(params, dag, state_rewards[t.terminal()], t).exp();
        let d = ratio - 1.0;
        out.loss += wt * d * d;
        let coef = 2.0 * wt * d * ratio;
        out.grad_zeta += coef;
        for (&e, &s) in t.edges().iter().zip(t.states()) {
            out.grad_w[e] += coef;
            for (&k, p) in dag.out_edges(s).iter().zip(softmax_out(params, dag, s)) {
                out.grad_w[k] -= coef * p;
            }
        }
    }
    Ok(out)
}

/// Every non-source state, in id order.
pub fn all_fm_states(dag: &Dag) -> Vec<StateId> {
    (0..dag.n_states()).filter(|&s| s != dag.source()).collect()
}

/// Full-objective loss and gradient: FM over all non-source states, DB over
/// all edges, TB over `trajs` weighted by their current forward
/// probabilities (held fixed for the gradient).
pub fn exhaustive_loss_grad(
    objective: Objective,
    params: &LogFlowParams,
    dag: &Dag,
    state_rewards: &[f64],
    trajs: &[Trajectory],
) -> Result<LossGrad, ObjectiveError> {
    match objective {
        Objective::Fm => fm_loss_grad_with(params, dag, state_rewards, &all_fm_states(dag)),
        Objective::Db => {
            let edges: Vec<EdgeId> = (0..dag.n_edges()).collect();
            db_loss_grad_with(params, dag, state_rewards, &edges)
        }
        Objective::Tb => {
            let weights: Vec<f64> =
                trajs.iter().map(|t| logprob_unchecked(params, dag, t).exp()).collect();
            tb_loss_grad_weighted(params, dag, state_rewards, trajs, &weights)
        }
    }
}
