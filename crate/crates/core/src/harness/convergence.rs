use crate::emit::{CellRun, Check, Plot, Summary, Table};
use crate::fit::{fit_loglog, is_nonincreasing, mean};
use crate::objectives::Objective;
use crate::par;
use crate::trainer::{derive_seed, NoiseConfig, Run, SamplingMode, Schedule, TrainConfig, TrainContext};

use super::{EnvSpec, ExperimentSpec, HarnessError};

fn default_schedule(o: Objective) -> Schedule {
    match o {
        Objective::Fm => Schedule::InvSqrt,
        _ => Schedule::TwoThirds,
    }
}

fn default_eta0(o: Objective) -> f64 {
    match o {
        Objective::Fm => 0.5,
        Objective::Db => 0.1,
        Objective::Tb => 0.1,
    }
}

/// Slope bound each objective's fitted exponent must not exceed.
fn slope_bound(o: Objective) -> f64 {
    match o {
        Objective::Fm => -0.3,
        _ => -0.15,
    }
}

/// Minimum full-gradient norm squared over the first `T` iterates, for every
/// `T` in the grid, from one run of length `max T` per seed. FM draws states
/// and DB draws edges uniformly, one per step.
pub fn run_convergence(spec: &ExperimentSpec) -> Result<Summary, HarnessError> {
    let env_spec = spec.env_or(EnvSpec::Diamond { reward: 1.0 });
    let env = env_spec.build()?;
    let objectives: Vec<Objective> = spec.list("objective", &[Objective::Fm, Objective::Db])?;
    let mut ts: Vec<usize> = spec.list("T", &[100, 1_000, 10_000, 100_000])?;
    ts.sort_unstable();
    ts.dedup();
    if ts.is_empty() || ts[0] == 0 {
        return Err(HarnessError::InvalidSpec("T values must be positive".into()));
    }
    let seeds = spec.seeds_or(10);
    let t_max = *ts.last().unwrap();

    let mut summary = Summary::new("convergence");
    let mut slope_table =
        Table::new("slope", &["objective", "schedule", "eta0", "slope", "intercept", "r2", "n_points", "bound"]);
    let mut curve_table = Table::new("mingrad", &["objective", "T", "mean_min_grad_sq", "seeds"]);
    let mut plot = Plot::new("mingrad", "T", "mean min grad norm^2", true, true);
    let mut slopes = Vec::new();

    for &objective in &objectives {
        let schedule = spec.one("schedule", default_schedule(objective))?;
        let eta0 = spec.one("eta0", default_eta0(objective))?;
        let ctx = TrainContext::new(&env, objective)?;
        let seed_ids: Vec<u64> = (0..seeds as u64).collect();
        let per_seed = par::map(&seed_ids, |&i| -> Result<(Vec<f64>, Vec<crate::trainer::RunRow>), HarnessError> {
            let mut cfg = TrainConfig::new(objective, schedule, eta0, t_max);
            cfg.sampling = SamplingMode::Uniform;
            cfg.seed = derive_seed(spec.base_seed, i);
            cfg.track_min_grad = true;
            let mut run = Run::new(&env, &ctx, &cfg, NoiseConfig::none())?;
            let mut mins = Vec::with_capacity(ts.len());
            let mut rows = Vec::new();
            let mut next = 0;
            for t in 1..=t_max {
                run.step()?;
                if t.is_power_of_two() || t == t_max {
                    rows.push(run.record()?);
                }
                if ts[next] == t {
                    mins.push(run.min_grad_sq());
                    next += 1;
                }
            }
            Ok((mins, rows))
        });
        let mut ok = Vec::new();
        for (i, r) in per_seed.into_iter().enumerate() {
            match r {
                Ok((mins, rows)) => {
                    if i == 0 {
                        summary.runs.push(CellRun { key: format!("{objective}_seed0"), rows });
                    }
                    ok.push(mins);
                }
                Err(e) => summary.failed_cells.push(format!("{objective}/seed{i}: {e}")),
            }
        }
        if ok.is_empty() {
            continue;
        }
        let means: Vec<f64> = (0..ts.len()).map(|k| mean(&ok.iter().map(|m| m[k]).collect::<Vec<_>>())).collect();
        for (&t, &m) in ts.iter().zip(&means) {
            curve_table.push(vec![objective.to_string().into(), t.into(), m.into(), ok.len().into()]);
        }
        let pts: Vec<(f64, f64)> = ts.iter().zip(&means).map(|(&t, &m)| (t as f64, m.max(f64::MIN_POSITIVE))).collect();
        if means.iter().any(|&m| m <= 0.0) && means.iter().any(|&m| m > 0.0) {
            summary.notes.push(format!("{objective}: zero mean minimum floored at the smallest positive float for the fit"));
        }
        plot.add(objective.to_string(), pts.clone());
        summary.checks.push(Check::asserted(
            format!("{objective}_mingrad_nonincreasing"),
            is_nonincreasing(&means),
            means.last().copied().unwrap_or(f64::NAN),
            means.first().copied().unwrap_or(f64::NAN),
            "mean min grad norm^2 over seeds must not increase with T",
        ));
        let bound = slope_bound(objective);
        if means.iter().all(|&m| m == 0.0) {
            summary.checks.push(Check::asserted(
                format!("{objective}_slope"),
                true,
                f64::NEG_INFINITY,
                bound,
                "gradient exactly zero from the smallest T on; the envelope holds trivially",
            ));
            slopes.push((objective, f64::NEG_INFINITY));
            continue;
        }
        match fit_loglog(&pts) {
            Ok(fit) => {
                slope_table.push(vec![
                    objective.to_string().into(),
                    format!("{schedule:?}").into(),
                    eta0.into(),
                    fit.slope.into(),
                    fit.intercept.into(),
                    fit.r2.into(),
                    fit.n_points.into(),
                    bound.into(),
                ]);
                summary.checks.push(Check::asserted(
                    format!("{objective}_slope"),
                    fit.slope <= bound,
                    fit.slope,
                    bound,
                    format!("log-log slope of mean min grad norm^2 vs T (r2 {:.4})", fit.r2),
                ));
                slopes.push((objective, fit.slope));
            }
            Err(e) => summary.notes.push(format!("{objective}: no slope fit ({e})")),
        }
    }
    let fm = slopes.iter().find(|s| s.0 == Objective::Fm).map(|s| s.1);
    let db = slopes.iter().find(|s| s.0 == Objective::Db).map(|s| s.1);
    if let (Some(fm), Some(db)) = (fm, db) {
        summary.checks.push(Check::info("db_slope_vs_fm", db >= fm - 1.0, db, fm - 1.0, "DB slope >= FM slope - 1"));
    }
    summary.tables.push(slope_table);
    summary.tables.push(curve_table);
    summary.plots.push(plot);
    Ok(summary)
}
