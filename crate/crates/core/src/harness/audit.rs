use crate::emit::{Check, Plot, Summary, Table};
use crate::objectives::Objective;
use crate::oracle::{audit_assumptions, estimate_constants};
use crate::trainer::{derive_seed, stream_rng, train, Checkpoints, NoiseConfig, Schedule, TrainConfig, TrainContext};

use super::{EnvSpec, ExperimentSpec, HarnessError};

/// Empirical audit of the visitation, correlation, rank and error
/// propagation assumptions at TB-pretrained parameters. Informational only.
pub fn run_audit(spec: &ExperimentSpec) -> Result<Summary, HarnessError> {
    let env_spec = spec.env_or(EnvSpec::Diamond { reward: 1.0 });
    let env = env_spec.build()?;
    let pretrain: usize = spec.one("pretrain", 5_000)?;
    let probe: f64 = spec.one("probe", 0.05)?;
    let draws: usize = spec.one("draws", 1000)?;
    let ctx = TrainContext::new(&env, Objective::Tb)?;
    let table = ctx
        .table
        .as_ref()
        .ok_or_else(|| HarnessError::InvalidSpec("audit needs an enumerable environment".into()))?;
    let mut cfg = TrainConfig::new(Objective::Tb, Schedule::InvSqrt, 0.1, pretrain.max(1));
    cfg.seed = derive_seed(spec.base_seed, 0);
    let params = train(&env, &ctx, &cfg, NoiseConfig::none(), Checkpoints::Every(pretrain.max(1)))?.final_params;
    let mut rng = stream_rng(derive_seed(spec.base_seed, 1), 0);
    let report = audit_assumptions(&env.dag, table, &params, probe, draws, &mut rng);
    let constants = estimate_constants(&params, &env, Objective::Tb, 256, &mut rng);

    let mut summary = Summary::new("audit");
    let mut t = Table::new("assumptions", &["quantity", "value"]);
    for (k, v) in [
        ("min_visit_scaled", report.min_visit_scaled),
        ("min_rank_ratio", report.min_rank_ratio),
        ("fitted_rho", report.fitted_rho),
        ("edge_error_mean", report.edge_error_mean),
        ("error_slope", report.error_regression.slope),
        ("error_r2", report.error_regression.r2),
        ("g_est", constants.g_est),
        ("k_theta", constants.k_theta),
        ("flow_min", constants.flow_min),
        ("flow_max", constants.flow_max),
        ("min_transition_prob", constants.min_transition_prob),
    ] {
        t.push(vec![k.into(), v.into()]);
    }
    let mut ranks = Table::new("ranks", &["trajectory", "length", "rank", "ratio"]);
    for r in &report.ranks {
        ranks.push(vec![r.index.into(), r.length.into(), r.rank.into(), r.ratio.into()]);
    }
    let mut lags = Table::new("lags", &["lag", "correlation"]);
    for (k, c) in report.lag_correlations.iter().enumerate() {
        lags.push(vec![k.into(), (*c).into()]);
    }
    let mut plot = Plot::new("lags", "lag", "error correlation", false, false);
    plot.add("corr", report.lag_correlations.iter().enumerate().map(|(k, c)| (k as f64, *c)).collect());
    summary.checks.push(Check::info("visitation_bounded_below", report.min_visit_scaled > 0.0, report.min_visit_scaled, 0.0, "min_s pi(s) |S|"));
    summary.checks.push(Check::info("rho_below_one", report.fitted_rho < 1.0, report.fitted_rho, 1.0, "lag-k correlation envelope"));
    summary.checks.push(Check::info("rank_ratio", report.min_rank_ratio > 0.0, report.min_rank_ratio, 0.0, "min rank(A_tau) / L"));
    summary.tables.push(t);
    summary.tables.push(ranks);
    summary.tables.push(lags);
    summary.plots.push(plot);
    Ok(summary)
}
