//! Plain SGD on the tabular objectives with metric logging and reward noise.

use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow_model::{
    edge_visitation, sample_backward, sample_forward, terminal_distribution, InitConfig, LogFlowParams, ModelError,
    Trajectory,
};
use crate::graph::{Env, StateId};
use crate::objectives::{
    all_fm_states, db_loss_grad_with, exhaustive_loss_grad, fm_loss_grad_with, tb_loss_grad_weighted, LossGrad,
    Objective, ObjectiveError,
};
use crate::oracle::{
    backward_uniform_flow, build_incidence, enumerate_trajectories, k_theta, max_entropy_flow, MaxEntOptions,
    OracleError, TrajectoryTable,
};

/// Enumeration cap used when the trainer builds its own trajectory table.
pub const TRAINER_TABLE_CAP: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}")]
    Diverged { step: usize, last_record: Option<Box<RunRow>> },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("io error at {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    InvSqrt,
    TwoThirds,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inv_sqrt" => Ok(Self::InvSqrt),
            "two_thirds" => Ok(Self::TwoThirds),
            "constant" => Ok(Self::Constant),
            other => Err(format!("unknown schedule '{other}'")),
        }
    }
}

/// Step size at step `t >= 1`.
pub fn lr(schedule: Schedule, eta0: f64, t: usize) -> Result<f64, TrainError> {
    if t == 0 {
        return Err(TrainError::InvalidArgument("step index starts at 1".into()));
    }
    let t = t as f64;
    Ok(match schedule {
        Schedule::InvSqrt => eta0 / t.sqrt(),
        Schedule::TwoThirds => eta0 / t.powf(2.0 / 3.0),
        Schedule::Constant => eta0,
    })
}

/// How each step's batch is drawn.
///
/// Trajectory-based modes feed FM the visited non-source states, DB the
/// traversed edges and TB the trajectories themselves. `Uniform` draws FM
/// states, DB edges or TB table entries uniformly, giving unbiased estimates
/// of the full objective. `Exhaustive` uses the full objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    OnPolicy,
    Backward,
    UniformTraj,
    Custom(Vec<f64>),
    Uniform,
    Exhaustive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub schedule: Schedule,
    pub eta0: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub sampling: SamplingMode,
    pub seed: u64,
    pub init: InitConfig,
    /// Evaluate the full gradient at every iterate for the running minimum.
    pub track_min_grad: bool,
}

impl TrainConfig {
    pub fn new(objective: Objective, schedule: Schedule, eta0: f64, steps: usize) -> Self {
        Self {
            objective,
            schedule,
            eta0,
            steps,
            batch_size: 1,
            sampling: SamplingMode::OnPolicy,
            seed: 0,
            init: InitConfig::default(),
            track_min_grad: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.eta0 >= 0.0) || !self.eta0.is_finite() {
            return Err(TrainError::InvalidArgument("eta0 must be finite and nonnegative".into()));
        }
        if self.steps == 0 {
            return Err(TrainError::InvalidArgument("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    UniformZeroMean,
    GaussianZeroMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    /// Fresh noise on every terminal at every optimizer step.
    PerDraw,
    /// One draw per terminal per run.
    FixedRealization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    pub sigma2: f64,
    /// `None` means `R_min / 10`.
    pub floor: Option<f64>,
    pub resample: Resample,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { kind: NoiseKind::None, sigma2: 0.0, floor: None, resample: Resample::PerDraw }
    }

    pub fn new(kind: NoiseKind, sigma2: f64, resample: Resample) -> Self {
        Self { kind, sigma2, floor: None, resample }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return Err(TrainError::InvalidArgument("sigma2 must be finite and nonnegative".into()));
        }
        if let Some(f) = self.floor {
            if !(f > 0.0) {
                return Err(TrainError::InvalidArgument("floor must be positive".into()));
            }
        }
        Ok(())
    }

    /// One zero-mean draw with variance `sigma2`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::UniformZeroMean => {
                let half = (3.0 * self.sigma2).sqrt();
                if half == 0.0 {
                    0.0
                } else {
                    rng.random_range(-half..half)
                }
            }
            NoiseKind::GaussianZeroMean => {
                let z: f64 = StandardNormal.sample(rng);
                self.sigma2.sqrt() * z
            }
        }
    }
}

/// Noisy reward source for one run, with clamp accounting.
#[derive(Debug, Clone)]
pub struct RewardNoise {
    config: NoiseConfig,
    base: Vec<f64>,
    terminals: Vec<StateId>,
    floor: f64,
    fixed: Option<Vec<f64>>,
    current: Vec<f64>,
    clamps: u64,
    draws: u64,
}

impl RewardNoise {
    pub fn new<R: Rng + ?Sized>(env: &Env, config: NoiseConfig, rng: &mut R) -> Result<Self, TrainError> {
        config.validate()?;
        let floor = config.floor.unwrap_or(env.rewards.r_min() / 10.0);
        let base = env.rewards.per_state();
        let terminals = env.rewards.terminals().to_vec();
        let mut out = Self {
            config,
            current: base.clone(),
            base,
            terminals,
            floor,
            fixed: None,
            clamps: 0,
            draws: 0,
        };
        if config.kind != NoiseKind::None && config.resample == Resample::FixedRealization {
            let eps: Vec<f64> = out.terminals.iter().map(|_| config.draw(rng)).collect();
            out.fixed = Some(eps);
            out.refresh_from_fixed();
        }
        Ok(out)
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    fn apply(&mut self, state: StateId, eps: f64) -> f64 {
        let raw = self.base[state] + eps;
        self.draws += 1;
        if raw < self.floor {
            self.clamps += 1;
            self.floor
        } else {
            raw
        }
    }

    fn refresh_from_fixed(&mut self) {
        let eps = self.fixed.clone().unwrap_or_default();
        for (i, &t) in self.terminals.clone().iter().enumerate() {
            self.current[t] = self.apply(t, eps[i]);
        }
    }

    /// `max(R + eps, floor)` for one terminal.
    pub fn effective_reward<R: Rng + ?Sized>(&mut self, terminal: StateId, rng: &mut R) -> f64 {
        match self.config.kind {
            NoiseKind::None => self.base[terminal],
            _ => match &self.fixed {
                Some(_) => self.current[terminal],
                None => {
                    let eps = self.config.draw(rng);
                    self.apply(terminal, eps)
                }
            },
        }
    }

    /// Per-state rewards for the next optimizer step.
    pub fn step_rewards<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        if self.config.kind != NoiseKind::None && self.fixed.is_none() {
            for i in 0..self.terminals.len() {
                let t = self.terminals[i];
                let v = self.effective_reward(t, rng);
                self.current[t] = v;
            }
        }
        &self.current
    }

    pub fn clamp_count(&self) -> u64 {
        self.clamps
    }

    pub fn draw_count(&self) -> u64 {
        self.draws
    }

    pub fn clamp_rate(&self) -> f64 {
        if self.draws == 0 {
            0.0
        } else {
            self.clamps as f64 / self.draws as f64
        }
    }
}

/// Rows at which metrics are recorded. The final step is always included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Checkpoints {
    /// Powers of two.
    Geometric,
    Every(usize),
}

impl Checkpoints {
    pub fn hits(&self, t: usize, last: usize) -> bool {
        t == last
            || match self {
                Self::Geometric => t.is_power_of_two(),
                Self::Every(k) => *k > 0 && t % k == 0,
            }
    }
}

/// One checkpoint row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub t: usize,
    pub eta: f64,
    /// Full-objective loss and gradient norm after step `t` with true rewards.
    pub loss: f64,
    pub grad_norm: f64,
    /// Minimum full-gradient norm squared over the iterates of steps `1..=t`.
    pub min_grad_sq: f64,
    pub l1_flow_err: f64,
    pub tv: f64,
    pub kl: f64,
    pub g_est: f64,
    pub k_est: f64,
    pub clamp_rate: f64,
}

pub const CSV_HEADER: &str = "t,eta,loss,grad_norm,min_grad_sq,l1_flow_err,tv,kl,g_est,k_est,clamp_rate";

/// Seventeen significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl RunRow {
    pub fn csv_line(&self) -> String {
        let mut s = self.t.to_string();
        for v in [
            self.eta,
            self.loss,
            self.grad_norm,
            self.min_grad_sq,
            self.l1_flow_err,
            self.tv,
            self.kl,
            self.g_est,
            self.k_est,
            self.clamp_rate,
        ] {
            s.push(',');
            s.push_str(&fmt_f64(v));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RunRow>,
    pub final_params: LogFlowParams,
    pub clamp_count: u64,
    pub draw_count: u64,
}

impl RunRecord {
    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv())
            .map_err(|e| TrainError::Io { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn last(&self) -> &RunRow {
        self.rows.last().expect("a run has at least one row")
    }
}

pub fn rows_to_csv(rows: &[RunRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// `0.5 * sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `KL(p || q)`; zero-mass entries of `p` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| if *b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum::<f64>()
        .max(0.0)
}

/// Independent random stream `stream` of run seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of run `index` under base seed `base` (splitmix64).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SAMPLE: u64 = 0;
const STREAM_NOISE: u64 = 1;
const STREAM_INIT: u64 = 2;

/// Flow implied by the parameters for an objective: `exp(w)` for FM and DB,
/// `exp(zeta)` times edge-visitation probability for TB.
pub fn model_flow(objective: Objective, params: &LogFlowParams, env: &Env) -> Vec<f64> {
    match objective {
        Objective::Fm | Objective::Db => params.w().iter().map(|w| w.exp()).collect(),
        Objective::Tb => {
            let z = params.zeta().exp();
            edge_visitation(params, &env.dag).into_iter().map(|p| z * p).collect()
        }
    }
}

/// Precomputed per-environment data shared by all runs on it.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub table: Option<TrajectoryTable>,
    /// Reference flow for the L1 metric: max-entropy for FM, the
    /// backward-uniform flow (the DB and TB optimum) otherwise.
    pub reference: Vec<f64>,
    pub target: Vec<f64>,
    pub k_theta: f64,
    all_states: Vec<StateId>,
}

impl TrainContext {
    pub fn new(env: &Env, objective: Objective) -> Result<Self, TrainError> {
        let table = enumerate_trajectories(&env.dag, &env.rewards, TRAINER_TABLE_CAP).ok();
        let reference = match objective {
            Objective::Fm => {
                let sys = build_incidence(&env.dag, &env.rewards);
                let o = MaxEntOptions::default();
                max_entropy_flow(&sys, &env.dag, o.tol, o.max_iters)?.edge_flows
            }
            _ => backward_uniform_flow(&env.dag, &env.rewards),
        };
        Ok(Self::with_reference(env, table, reference))
    }

    pub fn with_reference(env: &Env, table: Option<TrajectoryTable>, reference: Vec<f64>) -> Self {
        Self {
            table,
            reference,
            target: crate::oracle::exact_terminal_distribution(&env.rewards),
            k_theta: k_theta(&env.dag),
            all_states: all_fm_states(&env.dag),
        }
    }

    fn table(&self) -> Result<&TrajectoryTable, TrainError> {
        self.table
            .as_ref()
            .ok_or_else(|| TrainError::InvalidArgument("sampling mode needs an enumerable environment".into()))
    }
}

/// Full objective at `params` with the given per-state rewards.
pub fn full_loss_grad(
    objective: Objective,
    params: &LogFlowParams,
    env: &Env,
    ctx: &TrainContext,
    state_rewards: &[f64],
) -> Result<LossGrad, TrainError> {
    let trajs: &[Trajectory] = match (objective, &ctx.table) {
        (Objective::Tb, Some(t)) => &t.trajectories,
        (Objective::Tb, None) => return Err(TrainError::InvalidArgument("TB full objective needs enumeration".into())),
        _ => &[],
    };
    Ok(exhaustive_loss_grad(objective, params, &env.dag, state_rewards, trajs)?)
}

enum Batch {
    States(Vec<StateId>),
    Edges(Vec<usize>),
    Trajs(Vec<Trajectory>),
    Full,
}

struct Sampler {
    weighted: Option<WeightedIndex<f64>>,
}

impl Sampler {
    fn new(config: &TrainConfig, ctx: &TrainContext) -> Result<Self, TrainError> {
        let weighted = match &config.sampling {
            SamplingMode::Custom(p) => {
                let table = ctx.table()?;
                if p.len() != table.count() {
                    return Err(TrainError::InvalidArgument(format!(
                        "{} custom probabilities for {} trajectories",
                        p.len(),
                        table.count()
                    )));
                }
                Some(WeightedIndex::new(p).map_err(|e| TrainError::InvalidArgument(e.to_string()))?)
            }
            SamplingMode::UniformTraj => Some(
                WeightedIndex::new(vec![1.0; ctx.table()?.count()])
                    .map_err(|e| TrainError::InvalidArgument(e.to_string()))?,
            ),
            SamplingMode::Uniform if config.objective == Objective::Tb => Some(
                WeightedIndex::new(vec![1.0; ctx.table()?.count()])
                    .map_err(|e| TrainError::InvalidArgument(e.to_string()))?,
            ),
            _ => None,
        };
        Ok(Self { weighted })
    }

    fn draw<R: Rng + ?Sized>(
        &self,
        config: &TrainConfig,
        params: &LogFlowParams,
        env: &Env,
        ctx: &TrainContext,
        rng: &mut R,
    ) -> Batch {
        let n = config.batch_size;
        let trajs: Vec<Trajectory> = match &config.sampling {
            SamplingMode::Exhaustive => return Batch::Full,
            SamplingMode::Uniform if config.objective != Objective::Tb => {
                return match config.objective {
                    Objective::Fm => Batch::States(
                        (0..n).map(|_| ctx.all_states[rng.random_range(0..ctx.all_states.len())]).collect(),
                    ),
                    _ => Batch::Edges((0..n).map(|_| rng.random_range(0..env.dag.n_edges())).collect()),
                };
            }
            SamplingMode::OnPolicy => (0..n).map(|_| sample_forward(params, &env.dag, rng)).collect(),
            SamplingMode::Backward => (0..n).map(|_| sample_backward(&env.dag, &env.rewards, rng)).collect(),
            _ => {
                let table = ctx.table.as_ref().expect("checked at construction");
                let w = self.weighted.as_ref().expect("checked at construction");
                (0..n).map(|_| table.trajectories[w.sample(rng)].clone()).collect()
            }
        };
        trajs_to_batch(config.objective, trajs)
    }
}

fn trajs_to_batch(objective: Objective, trajs: Vec<Trajectory>) -> Batch {
    match objective {
        Objective::Fm => Batch::States(trajs.iter().flat_map(|t| t.states()[1..].to_vec()).collect()),
        Objective::Db => Batch::Edges(trajs.iter().flat_map(|t| t.edges().to_vec()).collect()),
        Objective::Tb => Batch::Trajs(trajs),
    }
}

fn batch_loss_grad(
    objective: Objective,
    batch: &Batch,
    params: &LogFlowParams,
    env: &Env,
    ctx: &TrainContext,
    rewards: &[f64],
) -> Result<LossGrad, TrainError> {
    Ok(match batch {
        Batch::States(s) => fm_loss_grad_with(params, &env.dag, rewards, s)?,
        Batch::Edges(e) => db_loss_grad_with(params, &env.dag, rewards, e)?,
        Batch::Trajs(t) => {
            let w = vec![1.0 / t.len() as f64; t.len()];
            tb_loss_grad_weighted(params, &env.dag, rewards, t, &w)?
        }
        Batch::Full => full_loss_grad(objective, params, env, ctx, rewards)?,
    })
}

/// Training state shared by [`train`], [`replay_order`] and first-passage runs.
pub struct Run<'a> {
    env: &'a Env,
    ctx: &'a TrainContext,
    config: &'a TrainConfig,
    pub params: LogFlowParams,
    noise: RewardNoise,
    sample_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    sampler: Sampler,
    true_rewards: Vec<f64>,
    min_grad_sq: f64,
    g_est: f64,
    pub step: usize,
    last_row: Option<RunRow>,
}

impl<'a> Run<'a> {
    pub fn new(env: &'a Env, ctx: &'a TrainContext, config: &'a TrainConfig, noise: NoiseConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut init_rng = stream_rng(config.seed, STREAM_INIT);
        let params = LogFlowParams::init(&env.dag, &env.rewards, &config.init, &mut init_rng);
        Self::with_params(env, ctx, config, noise, params)
    }

    pub fn with_params(
        env: &'a Env,
        ctx: &'a TrainContext,
        config: &'a TrainConfig,
        noise: NoiseConfig,
        params: LogFlowParams,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let mut noise_rng = stream_rng(config.seed, STREAM_NOISE);
        let noise = RewardNoise::new(env, noise, &mut noise_rng)?;
        Ok(Self {
            env,
            ctx,
            config,
            params,
            noise,
            sample_rng: stream_rng(config.seed, STREAM_SAMPLE),
            noise_rng,
            sampler: Sampler::new(config, ctx)?,
            true_rewards: env.rewards.per_state(),
            min_grad_sq: f64::INFINITY,
            g_est: 0.0,
            step: 0,
            last_row: None,
        })
    }

    /// Advance one step, drawing a batch per the sampling mode.
    pub fn step(&mut self) -> Result<(), TrainError> {
        let batch = self.sampler.draw(self.config, &self.params, self.env, self.ctx, &mut self.sample_rng);
        self.step_with(batch)
    }

    /// Advance one step on a single given trajectory.
    pub fn step_on(&mut self, traj: &Trajectory) -> Result<(), TrainError> {
        self.step_with(trajs_to_batch(self.config.objective, vec![traj.clone()]))
    }

    fn step_with(&mut self, batch: Batch) -> Result<(), TrainError> {
        let t = self.step + 1;
        let eta = lr(self.config.schedule, self.config.eta0, t)?;
        if self.config.track_min_grad {
            let full = full_loss_grad(self.config.objective, &self.params, self.env, self.ctx, &self.true_rewards)?;
            self.min_grad_sq = self.min_grad_sq.min(full.grad_norm_sq());
        }
        let rewards = self.noise.step_rewards(&mut self.noise_rng);
        let lg = batch_loss_grad(self.config.objective, &batch, &self.params, self.env, self.ctx, rewards)?;
        self.g_est = self.g_est.max(lg.grad_norm());
        let grad_zeta = if self.config.objective == Objective::Tb { lg.grad_zeta } else { 0.0 };
        if self.params.apply_step(eta, &lg.grad_w, grad_zeta).is_err() {
            return Err(TrainError::Diverged { step: t, last_record: self.last_row.clone().map(Box::new) });
        }
        self.step = t;
        Ok(())
    }

    /// Metrics at the current parameters.
    pub fn record(&mut self) -> Result<RunRow, TrainError> {
        let t = self.step.max(1);
        let full = full_loss_grad(self.config.objective, &self.params, self.env, self.ctx, &self.true_rewards)?;
        let flow = model_flow(self.config.objective, &self.params, self.env);
        let l1 = flow.iter().zip(&self.ctx.reference).map(|(a, b)| (a - b).abs()).sum();
        let p = terminal_distribution(&self.params, &self.env.dag);
        let min_grad_sq = if self.config.track_min_grad { self.min_grad_sq } else { f64::NAN };
        let row = RunRow {
            t: self.step,
            eta: lr(self.config.schedule, self.config.eta0, t)?,
            loss: full.loss,
            grad_norm: full.grad_norm(),
            min_grad_sq,
            l1_flow_err: l1,
            tv: total_variation(&p, &self.ctx.target),
            kl: kl_divergence(&p, &self.ctx.target),
            g_est: self.g_est,
            k_est: self.ctx.k_theta,
            clamp_rate: self.noise.clamp_rate(),
        };
        self.last_row = Some(row.clone());
        Ok(row)
    }

    pub fn noise(&self) -> &RewardNoise {
        &self.noise
    }

    pub fn min_grad_sq(&self) -> f64 {
        self.min_grad_sq
    }

    fn finish(self, rows: Vec<RunRow>) -> RunRecord {
        RunRecord {
            rows,
            final_params: self.params,
            clamp_count: self.noise.clamp_count(),
            draw_count: self.noise.draw_count(),
        }
    }
}

/// Run `config.steps` SGD steps, recording at each checkpoint.
pub fn train(
    env: &Env,
    ctx: &TrainContext,
    config: &TrainConfig,
    noise: NoiseConfig,
    checkpoints: Checkpoints,
) -> Result<RunRecord, TrainError> {
    let mut run = Run::new(env, ctx, config, noise)?;
    let mut rows = Vec::new();
    for t in 1..=config.steps {
        run.step()?;
        if checkpoints.hits(t, config.steps) {
            rows.push(run.record()?);
        }
    }
    Ok(run.finish(rows))
}

/// Train on `trajs` in the given order, one trajectory per step.
/// `config.steps` and `config.sampling` are ignored.
pub fn replay_order(
    env: &Env,
    ctx: &TrainContext,
    trajs: &[Trajectory],
    config: &TrainConfig,
    checkpoints: Checkpoints,
) -> Result<RunRecord, TrainError> {
    if trajs.is_empty() {
        return Err(TrainError::InvalidArgument("empty trajectory list".into()));
    }
    for t in trajs {
        t.validate(&env.dag)?;
    }
    let cfg = TrainConfig { steps: trajs.len(), sampling: SamplingMode::OnPolicy, ..config.clone() };
    let mut run = Run::new(env, ctx, &cfg, NoiseConfig::none())?;
    let mut rows = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        run.step_on(t)?;
        if checkpoints.hits(i + 1, trajs.len()) {
            rows.push(run.record()?);
        }
    }
    Ok(run.finish(rows))
}

/// Accuracy measure for first-passage sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accuracy {
    /// TV between the model's terminal distribution and `R / Z_R`.
    TerminalTv,
    /// TV between forward trajectory probabilities and the table's targets.
    TrajectoryTv,
    /// `|F - F*|_1 / |F*|_1` with the objective's model and reference flows.
    FlowRelL1,
}

impl std::str::FromStr for Accuracy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "terminal_tv" => Ok(Self::TerminalTv),
            "trajectory_tv" => Ok(Self::TrajectoryTv),
            "flow_rel_l1" => Ok(Self::FlowRelL1),
            other => Err(format!("unknown accuracy metric '{other}'")),
        }
    }
}

pub fn accuracy_error(metric: Accuracy, objective: Objective, params: &LogFlowParams, env: &Env, ctx: &TrainContext) -> Result<f64, TrainError> {
    Ok(match metric {
        Accuracy::TerminalTv => total_variation(&terminal_distribution(params, &env.dag), &ctx.target),
        Accuracy::TrajectoryTv => {
            let table = ctx.table()?;
            total_variation(&table.forward_probs(params, &env.dag), &table.target_probs)
        }
        Accuracy::FlowRelL1 => {
            let flow = model_flow(objective, params, env);
            let num: f64 = flow.iter().zip(&ctx.reference).map(|(a, b)| (a - b).abs()).sum();
            num / ctx.reference.iter().map(|v| v.abs()).sum::<f64>()
        }
    })
}

/// Number of samples (steps times batch size) until the error first drops
/// to each target, or `None` if `cap_samples` is reached first.
pub fn first_passage(
    env: &Env,
    ctx: &TrainContext,
    config: &TrainConfig,
    noise: NoiseConfig,
    metric: Accuracy,
    targets: &[f64],
    cap_samples: usize,
) -> Result<Vec<Option<usize>>, TrainError> {
    let mut run = Run::new(env, ctx, config, noise)?;
    let mut hit: Vec<Option<usize>> = vec![None; targets.len()];
    let mut err = accuracy_error(metric, config.objective, &run.params, env, ctx)?;
    for (h, &eps) in hit.iter_mut().zip(targets) {
        if err <= eps {
            *h = Some(0);
        }
    }
    let max_steps = cap_samples / config.batch_size;
    while hit.iter().any(Option::is_none) && run.step < max_steps {
        run.step()?;
        err = accuracy_error(metric, config.objective, &run.params, env, ctx)?;
        for (h, &eps) in hit.iter_mut().zip(targets) {
            if h.is_none() && err <= eps {
                *h = Some(run.step * config.batch_size);
            }
        }
    }
    Ok(hit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_chain, build_v2};

    #[test]
    fn lr_examples() {
        assert!((lr(Schedule::InvSqrt, 0.1, 4).unwrap() - 0.05).abs() < 1e-17);
        assert!((lr(Schedule::TwoThirds, 0.1, 8).unwrap() - 0.025).abs() < 1e-15);
        assert_eq!(lr(Schedule::Constant, 0.3, 999).unwrap(), 0.3);
        assert!(matches!(lr(Schedule::Constant, 0.3, 0), Err(TrainError::InvalidArgument(_))));
    }

    #[test]
    fn noise_none_is_exact() {
        let env = build_v2(1.0, 3.0).unwrap();
        let mut rng = stream_rng(0, 0);
        let mut n = RewardNoise::new(&env, NoiseConfig::none(), &mut rng).unwrap();
        assert_eq!(n.effective_reward(2, &mut rng), 3.0);
        assert_eq!(n.clamp_rate(), 0.0);
    }

    #[test]
    fn floor_binds() {
        let env = build_v2(0.05, 3.0).unwrap();
        let cfg = NoiseConfig { kind: NoiseKind::GaussianZeroMean, sigma2: 100.0, floor: Some(0.05), resample: Resample::PerDraw };
        let mut rng = stream_rng(3, 0);
        let mut n = RewardNoise::new(&env, cfg, &mut rng).unwrap();
        let mut saw_clamp = false;
        for _ in 0..100 {
            let before = n.clamp_count();
            let v = n.effective_reward(1, &mut rng);
            assert!(v >= 0.05);
            if n.clamp_count() > before {
                assert_eq!(v, 0.05);
                saw_clamp = true;
            }
        }
        assert!(saw_clamp);
    }

    #[test]
    fn fixed_realization_reuses_draw() {
        let env = build_v2(1.0, 3.0).unwrap();
        let cfg = NoiseConfig::new(NoiseKind::UniformZeroMean, 0.01, Resample::FixedRealization);
        let mut rng = stream_rng(1, 0);
        let mut n = RewardNoise::new(&env, cfg, &mut rng).unwrap();
        let a = n.step_rewards(&mut rng).to_vec();
        let b = n.step_rewards(&mut rng).to_vec();
        assert_eq!(a, b);
        assert_ne!(a[1], 1.0);
    }

    #[test]
    fn zero_lr_keeps_init() {
        let env = build_chain(3, 2.0).unwrap();
        let ctx = TrainContext::new(&env, Objective::Fm).unwrap();
        let mut cfg = TrainConfig::new(Objective::Fm, Schedule::Constant, 0.0, 16);
        cfg.track_min_grad = true;
        let rec = train(&env, &ctx, &cfg, NoiseConfig::none(), Checkpoints::Every(1)).unwrap();
        assert_eq!(rec.final_params.w(), &[0.0; 3]);
        let first = &rec.rows[0];
        for r in &rec.rows {
            assert_eq!((r.loss, r.grad_norm, r.min_grad_sq, r.l1_flow_err, r.tv, r.kl),
                (first.loss, first.grad_norm, first.min_grad_sq, first.l1_flow_err, first.tv, first.kl));
        }
    }

    #[test]
    fn csv_has_header_and_precision() {
        let row = RunRow { t: 1, eta: 0.1, loss: 1.0 / 3.0, grad_norm: 0.0, min_grad_sq: 0.0, l1_flow_err: 0.0, tv: 0.0, kl: 0.0, g_est: 0.0, k_est: 1.0, clamp_rate: 0.0 };
        let csv = rows_to_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields.len(), 11);
        assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn checkpoint_schedule() {
        let hits: Vec<usize> = (1..=10).filter(|&t| Checkpoints::Geometric.hits(t, 10)).collect();
        assert_eq!(hits, vec![1, 2, 4, 8, 10]);
    }

    #[test]
    fn pinsker_holds_on_sample_pairs() {
        let p = [0.1, 0.2, 0.7];
        let q = [0.3, 0.3, 0.4];
        assert!(total_variation(&p, &q) <= (kl_divergence(&p, &q) / 2.0).sqrt());
    }
}
