use crate::emit::{Check, Plot, Summary, Table};
use crate::fit::{fit_loglog, is_nondecreasing, median, quantile};
use crate::flow_model::{InitConfig, InitScheme};
use crate::graph::{Env, GridReward};
use crate::objectives::Objective;
use crate::oracle::{discrepancy, OracleError, TrajectoryTable};
use crate::par;
use crate::trainer::{
    derive_seed, first_passage, Accuracy, NoiseConfig, Resample, SamplingMode, Schedule, TrainConfig,
    TrainContext,
};

use super::{fmt_key, EnvSpec, ExperimentSpec, HarnessError};

/// Sampling distribution over `table` with discrepancy exactly `d >= 1`:
/// every trajectory but the most likely target gets `target / d`, the
/// remainder goes to the most likely one.
pub fn custom_probs_with_discrepancy(table: &TrajectoryTable, d: f64) -> Result<Vec<f64>, OracleError> {
    if !(d >= 1.0) {
        return Err(OracleError::InvalidArgument("discrepancy is at least 1".into()));
    }
    let top = (0..table.count())
        .max_by(|&a, &b| table.target_probs[a].total_cmp(&table.target_probs[b]))
        .ok_or_else(|| OracleError::InvalidArgument("empty table".into()))?;
    let mut p: Vec<f64> = table.target_probs.iter().map(|t| t / d).collect();
    p[top] = 0.0;
    p[top] = 1.0 - p.iter().sum::<f64>();
    Ok(p)
}

pub(crate) struct Measure<'a> {
    pub env: &'a Env,
    pub ctx: &'a TrainContext,
    pub config: TrainConfig,
    pub noise: NoiseConfig,
    pub metric: Accuracy,
    pub cap: usize,
}

pub(crate) struct SeedOutcome {
    /// First-passage sample count per target, `None` when censored.
    pub n: Vec<Option<usize>>,
}

impl Measure<'_> {
    /// One first-passage run per seed; seed `i` uses `derive_seed(base, i)`.
    pub fn run(&self, eps: &[f64], seeds: usize, base: u64) -> Vec<Result<SeedOutcome, HarnessError>> {
        let ids: Vec<u64> = (0..seeds as u64).collect();
        par::map(&ids, |&i| {
            let cfg = TrainConfig { seed: derive_seed(base, i), ..self.config.clone() };
            let n = first_passage(self.env, self.ctx, &cfg, self.noise, self.metric, eps, self.cap)?;
            Ok(SeedOutcome { n })
        })
    }
}

pub(crate) struct CellStats {
    pub median: f64,
    pub quantile: f64,
    pub censored: usize,
    pub uncensored: usize,
}

/// Statistics of uncensored counts for target index `k`.
pub(crate) fn cell_stats(outcomes: &[SeedOutcome], k: usize, delta: f64) -> CellStats {
    let ns: Vec<f64> = outcomes.iter().filter_map(|o| o.n[k]).map(|n| n as f64).collect();
    CellStats {
        median: median(&ns),
        quantile: quantile(&ns, 1.0 - delta),
        censored: outcomes.len() - ns.len(),
        uncensored: ns.len(),
    }
}

fn collect(summary: &mut Summary, label: &str, results: Vec<Result<SeedOutcome, HarnessError>>) -> Vec<SeedOutcome> {
    let mut out = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => out.push(o),
            Err(e) => summary.failed_cells.push(format!("{label}/seed{i}: {e}")),
        }
    }
    out
}

fn base_config(objective: Objective, eta0: f64, schedule: Schedule, sampling: SamplingMode, width: f64) -> TrainConfig {
    let mut cfg = TrainConfig::new(objective, schedule, eta0, 1);
    cfg.sampling = sampling;
    if width > 0.0 {
        cfg.init = InitConfig { w: InitScheme::Uniform { half_width: width }, zeta: None };
    }
    cfg
}

const N_COLUMNS: [&str; 7] = ["cell", "x", "eps", "median_n", "quantile_n", "censored", "seeds"];

/// First-passage sample counts to exact accuracy targets. `study` selects
/// the sweep: `eps` (targets), `discrepancy` (custom samplers `D`), `size`
/// (grid sides) or `length` (chain lengths).
pub fn run_sample_complexity(spec: &ExperimentSpec) -> Result<Summary, HarnessError> {
    let study: String = spec.one("study", "eps".to_string())?;
    let seeds = spec.seeds_or(20);
    let delta: f64 = spec.one("delta", 0.1)?;
    let cap: usize = spec.one("cap", 1_000_000)?;
    let (eta_default, schedule_default) = match study.as_str() {
        "eps" => (0.01, Schedule::Constant),
        "length" => (0.1, Schedule::Constant),
        "size" => (0.01, Schedule::Constant),
        _ => (0.1, Schedule::InvSqrt),
    };
    let eta0: f64 = spec.one("eta0", eta_default)?;
    let schedule: Schedule = spec.one("schedule", schedule_default)?;
    let mut summary = Summary::new("sample_complexity");
    let mut table = Table::new(&format!("n_vs_{study}"), &N_COLUMNS);
    let mut plot = Plot::new(&format!("n_vs_{study}"), &study, "median N", true, true);
    summary.notes.push(format!("reported quantile is the {} quantile over uncensored seeds", 1.0 - delta));

    // (x, eps, median) per uncensored cell
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    let mut push = |summary: &mut Summary, table: &mut Table, cell: String, x: f64, eps: f64, outcomes: &[SeedOutcome], k: usize| {
        let st = cell_stats(outcomes, k, delta);
        summary.censored += st.censored;
        table.push(vec![
            cell.into(),
            x.into(),
            eps.into(),
            st.median.into(),
            st.quantile.into(),
            st.censored.into(),
            outcomes.len().into(),
        ]);
        if st.uncensored > 0 {
            points.push((x, eps, st.median));
        }
    };

    match study.as_str() {
        "eps" => {
            let env_spec = spec.env_or(EnvSpec::V2 { r1: 1.0, r2: 3.0 });
            let env = env_spec.build()?;
            let objective = spec.one("objective", Objective::Tb)?;
            let metric = spec.one("metric", Accuracy::TerminalTv)?;
            let eps = spec.eps_or(&[0.2, 0.1]);
            let width: f64 = spec.one("init_width", 0.0)?;
            let ctx = TrainContext::new(&env, objective)?;
            let m = Measure {
                env: &env,
                ctx: &ctx,
                config: base_config(objective, eta0, schedule, SamplingMode::OnPolicy, width),
                noise: NoiseConfig::none(),
                metric,
                cap,
            };
            let outcomes = collect(&mut summary, &env_spec.key(), m.run(&eps, seeds, spec.base_seed));
            for (k, &e) in eps.iter().enumerate() {
                push(&mut summary, &mut table, format!("{}_eps{}", env_spec.key(), fmt_key(e)), e, e, &outcomes, k);
            }
            for w in points.windows(2) {
                let (e0, e1) = (w[0].1, w[1].1);
                if (e1 * 2.0 - e0).abs() <= 1e-12 * e0 {
                    let ratio = w[1].2 / w[0].2;
                    summary.checks.push(Check::asserted(
                        format!("halving_eps_{}_ratio", fmt_key(e1)),
                        (2.0..=8.0).contains(&ratio),
                        ratio,
                        8.0,
                        "median N ratio when eps halves, expected in [2, 8]",
                    ));
                }
            }
        }
        "discrepancy" => {
            let env_spec = spec.env_or(EnvSpec::Diamond { reward: 1.0 });
            let env = env_spec.build()?;
            let objective = spec.one("objective", Objective::Tb)?;
            let metric = spec.one("metric", Accuracy::TrajectoryTv)?;
            let width: f64 = spec.one("init_width", 1.0)?;
            let ds: Vec<f64> = spec.list("D", &[1.0, 5.0])?;
            let eps = spec.eps_or(&[0.02]);
            let ctx = TrainContext::new(&env, objective)?;
            let table_ref = ctx
                .table
                .as_ref()
                .ok_or_else(|| HarnessError::InvalidSpec("discrepancy study needs an enumerable environment".into()))?;
            for &d in &ds {
                let probs = custom_probs_with_discrepancy(table_ref, d)?;
                let measured = discrepancy(table_ref, &probs)?;
                let m = Measure {
                    env: &env,
                    ctx: &ctx,
                    config: base_config(objective, eta0, schedule, SamplingMode::Custom(probs), width),
                    noise: NoiseConfig::none(),
                    metric,
                    cap,
                };
                let label = format!("{}_D{}", env_spec.key(), fmt_key(d));
                let outcomes = collect(&mut summary, &label, m.run(&eps, seeds, spec.base_seed));
                for (k, &e) in eps.iter().enumerate() {
                    push(&mut summary, &mut table, format!("{label}_eps{}", fmt_key(e)), measured, e, &outcomes, k);
                }
            }
            for &e in &eps {
                let meds: Vec<f64> = points.iter().filter(|p| p.1 == e).map(|p| p.2).collect();
                summary.checks.push(Check::asserted(
                    format!("n_nondecreasing_in_D_eps{}", fmt_key(e)),
                    is_nondecreasing(&meds),
                    meds.last().copied().unwrap_or(f64::NAN),
                    meds.first().copied().unwrap_or(f64::NAN),
                    "median N must not decrease as the discrepancy grows",
                ));
            }
        }
        "size" => {
            let (dim, landscape) = match spec.env_or(EnvSpec::Grid { dim: 2, side: 2, landscape: GridReward::Corner }) {
                EnvSpec::Grid { dim, landscape, .. } => (dim, landscape),
                _ => return Err(HarnessError::InvalidSpec("size study runs on grid environments".into())),
            };
            let sides: Vec<usize> = spec.list("side", &[2, 3, 4])?;
            let objective = spec.one("objective", Objective::Tb)?;
            let metric = spec.one("metric", Accuracy::TerminalTv)?;
            let eps = spec.eps_or(&[0.1]);
            for &side in &sides {
                let es = EnvSpec::Grid { dim, side, landscape };
                let env = es.build()?;
                let ctx = TrainContext::new(&env, objective)?;
                let m = Measure {
                    env: &env,
                    ctx: &ctx,
                    config: base_config(objective, eta0, schedule, SamplingMode::OnPolicy, 0.0),
                    noise: NoiseConfig::none(),
                    metric,
                    cap,
                };
                let outcomes = collect(&mut summary, &es.key(), m.run(&eps, seeds, spec.base_seed));
                for (k, &e) in eps.iter().enumerate() {
                    push(&mut summary, &mut table, format!("{}_eps{}", es.key(), fmt_key(e)), env.dag.n_states() as f64, e, &outcomes, k);
                }
            }
            fit_exponents(&mut summary, &points, &eps, "size", None);
        }
        "length" => {
            let reward = match &spec.env {
                Some(EnvSpec::Chain { reward, .. }) => *reward,
                _ => 2.0,
            };
            let lengths: Vec<usize> = spec.list("length", &[2, 4, 8, 16])?;
            let objective = spec.one("objective", Objective::Fm)?;
            let metric = spec.one("metric", Accuracy::FlowRelL1)?;
            let eps = spec.eps_or(&[0.05]);
            for &length in &lengths {
                let es = EnvSpec::Chain { length, reward };
                let env = es.build()?;
                let ctx = TrainContext::new(&env, objective)?;
                let m = Measure {
                    env: &env,
                    ctx: &ctx,
                    config: base_config(objective, eta0, schedule, SamplingMode::OnPolicy, 0.0),
                    noise: NoiseConfig::none(),
                    metric,
                    cap,
                };
                let outcomes = collect(&mut summary, &es.key(), m.run(&eps, seeds, spec.base_seed));
                for (k, &e) in eps.iter().enumerate() {
                    push(&mut summary, &mut table, format!("{}_eps{}", es.key(), fmt_key(e)), length as f64, e, &outcomes, k);
                }
            }
            fit_exponents(&mut summary, &points, &eps, "length", Some(0.5));
        }
        other => return Err(HarnessError::InvalidSpec(format!("unknown sample-complexity study '{other}'"))),
    }
    for &e in &dedup(points.iter().map(|p| p.1)) {
        plot.add(format!("eps={e}"), points.iter().filter(|p| p.1 == e).map(|p| (p.0, p.2)).collect());
    }
    if summary.censored > 0 {
        summary.notes.push(format!("{} censored seeds excluded from medians and fits", summary.censored));
    }
    summary.tables.push(table);
    summary.plots.push(plot);
    Ok(summary)
}

fn dedup(xs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for x in xs {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn fit_exponents(summary: &mut Summary, points: &[(f64, f64, f64)], eps: &[f64], what: &str, min_slope: Option<f64>) {
    for &e in eps {
        let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.1 == e).map(|p| (p.0, p.2)).collect();
        match fit_loglog(&pts) {
            Ok(fit) => {
                let name = format!("n_vs_{what}_slope_eps{}", fmt_key(e));
                let detail = format!("log-log slope of median N vs {what} (r2 {:.4}, {} points)", fit.r2, fit.n_points);
                summary.checks.push(match min_slope {
                    Some(b) => Check::asserted(name, fit.slope >= b, fit.slope, b, detail),
                    None => Check::info(name, true, fit.slope, f64::NAN, detail),
                });
            }
            Err(err) => {
                summary.notes.push(format!("no {what} fit at eps {e}: {err}"));
                if let Some(b) = min_slope {
                    summary.checks.push(Check::asserted(
                        format!("n_vs_{what}_slope_eps{}", fmt_key(e)),
                        false,
                        f64::NAN,
                        b,
                        format!("fit unavailable: {err}"),
                    ));
                }
            }
        }
    }
}

/// Median first-passage counts with noisy rewards relative to clean ones,
/// over a sigma^2 grid. Sampling and noise use separate random streams, so
/// the sigma^2 = 0 cell repeats the clean runs exactly.
pub fn run_noise_sample_ratio(spec: &ExperimentSpec) -> Result<Summary, HarnessError> {
    let env_spec = spec.env_or(EnvSpec::V2 { r1: 1.0, r2: 3.0 });
    let env = env_spec.build()?;
    let seeds = spec.seeds_or(20);
    let cap: usize = spec.one("cap", 1_000_000)?;
    let eta0: f64 = spec.one("eta0", 0.1)?;
    let schedule: Schedule = spec.one("schedule", Schedule::InvSqrt)?;
    let objective = spec.one("objective", Objective::Tb)?;
    let metric = spec.one("metric", Accuracy::TerminalTv)?;
    let kind = super::noise_kind(spec)?;
    let mut sigma2 = spec.sigma2_or(&[0.0, 1e-4, 1e-3, 1e-2]);
    if !sigma2.contains(&0.0) {
        sigma2.insert(0, 0.0);
    }
    sigma2.sort_by(f64::total_cmp);
    let eps = spec.eps_or(&[0.02, 0.04]);
    let z = env.rewards.z_r();
    let r_min = env.rewards.r_min();
    let ctx = TrainContext::new(&env, objective)?;

    let mut summary = Summary::new("noise_sample_ratio");
    let mut table =
        Table::new("ratio", &["eps", "sigma2", "median_n", "ratio", "noise_x", "clamp_rate", "censored", "seeds"]);
    let mut fits = Table::new("fit", &["eps", "c", "r2", "n_points"]);
    let mut plot = Plot::new("ratio", "sigma2", "median N ratio", false, false);
    let mut noise_terms: Vec<(f64, f64)> = Vec::new();

    let cells: Vec<f64> = sigma2.clone();
    let results = par::map(&cells, |&s2| {
        let noise = NoiseConfig::new(kind, s2, Resample::PerDraw);
        let m = Measure {
            env: &env,
            ctx: &ctx,
            config: base_config(objective, eta0, schedule, SamplingMode::OnPolicy, 0.0),
            noise,
            metric,
            cap,
        };
        let clamp = clamp_rate_probe(&env, noise, spec.base_seed);
        (m.run(&eps, seeds, spec.base_seed), clamp)
    });
    let mut per_sigma: Vec<(f64, Vec<SeedOutcome>, f64)> = Vec::new();
    for (&s2, (res, clamp)) in cells.iter().zip(results) {
        let outs = collect(&mut summary, &format!("sigma2_{}", fmt_key(s2)), res);
        per_sigma.push((s2, outs, clamp));
    }

    for (k, &e) in eps.iter().enumerate() {
        let base = cell_stats(&per_sigma[0].1, k, 0.1);
        let mut ratios = Vec::new();
        let mut xs = Vec::new();
        for (s2, outs, clamp) in &per_sigma {
            let st = cell_stats(outs, k, 0.1);
            summary.censored += st.censored;
            let ratio = st.median / base.median;
            let x = z * z * s2 / (e * e * r_min.powi(4));
            table.push(vec![
                e.into(),
                (*s2).into(),
                st.median.into(),
                ratio.into(),
                x.into(),
                (*clamp).into(),
                st.censored.into(),
                outs.len().into(),
            ]);
            if *clamp > 0.01 {
                summary.notes.push(format!("sigma2 {s2} flagged: clamp rate {clamp} exceeds 1%"));
                continue;
            }
            if st.uncensored > 0 && base.uncensored > 0 {
                ratios.push(ratio);
                xs.push(x);
            }
        }
        plot.add(format!("eps={e}"), per_sigma.iter().map(|p| p.0).zip(ratios.iter().copied()).collect());
        if let Some(&r0) = ratios.first() {
            summary.checks.push(Check::asserted(
                format!("ratio_at_zero_eps{}", fmt_key(e)),
                r0 == 1.0,
                r0,
                1.0,
                "sigma2 = 0 repeats the clean runs",
            ));
        }
        summary.checks.push(Check::asserted(
            format!("ratio_isotonic_eps{}", fmt_key(e)),
            is_nondecreasing(&ratios),
            ratios.last().copied().unwrap_or(f64::NAN),
            ratios.first().copied().unwrap_or(f64::NAN),
            "median N ratio must not decrease in sigma2",
        ));
        // ratio - 1 = C x, least squares through the origin
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sxy: f64 = xs.iter().zip(&ratios).map(|(x, r)| x * (r - 1.0)).sum();
        let c = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        let mean_r = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
        let ss_tot: f64 = ratios.iter().map(|r| (r - mean_r).powi(2)).sum();
        let ss_res: f64 = xs.iter().zip(&ratios).map(|(x, r)| (r - 1.0 - c * x).powi(2)).sum();
        let r2 = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 1.0 };
        fits.push(vec![e.into(), c.into(), r2.into(), xs.len().into()]);
        summary.checks.push(Check::asserted(
            format!("fit_r2_eps{}", fmt_key(e)),
            r2 >= 0.5,
            r2,
            0.5,
            format!("1 + C Z^2 sigma2 / (eps^2 R_min^4) with C = {c:.6e}"),
        ));
        if let Some(&last) = ratios.last() {
            noise_terms.push((e, last - 1.0));
        }
    }
    for a in &noise_terms {
        if let Some(b) = noise_terms.iter().find(|b| (b.0 - 2.0 * a.0).abs() <= 1e-12 * a.0) {
            let shrink = a.1 / b.1;
            summary.checks.push(Check::info(
                format!("eps_doubling_shrink_eps{}", fmt_key(a.0)),
                (2.0..=8.0).contains(&shrink),
                shrink,
                4.0,
                "noise term at the largest sigma2 shrinks by about 4 when eps doubles",
            ));
        }
    }
    if summary.censored > 0 {
        summary.notes.push(format!("{} censored seeds excluded from medians", summary.censored));
    }
    summary.tables.push(table);
    summary.tables.push(fits);
    summary.plots.push(plot);
    Ok(summary)
}

/// Clamp rate over 10^4 per-terminal draws at this noise level.
fn clamp_rate_probe(env: &Env, noise: NoiseConfig, seed: u64) -> f64 {
    let mut rng = crate::trainer::stream_rng(seed, 7);
    match crate::trainer::RewardNoise::new(env, noise, &mut rng) {
        Ok(mut n) => {
            for _ in 0..10_000 / env.rewards.terminals().len().max(1) {
                n.step_rewards(&mut rng);
            }
            n.clamp_rate()
        }
        Err(_) => f64::NAN,
    }
}
