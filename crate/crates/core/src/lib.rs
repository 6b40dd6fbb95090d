//! Tabular GFlowNet laboratory: DAG environments, log-flow parameters, the
//! FM/DB/TB objectives with exact gradients, exact oracles, an SGD trainer
//! and seeded experiment drivers.

pub mod emit;
pub mod fit;
pub mod flow_model;
pub mod graph;
pub mod harness;
pub mod objectives;
pub mod oracle;
pub mod par;
pub mod trainer;

pub use flow_model::{LogFlowParams, ModelError, Trajectory};
pub use graph::{Dag, Env, GraphError, RewardTable};
pub use objectives::{LossGrad, Objective, ObjectiveError};
pub use oracle::OracleError;
