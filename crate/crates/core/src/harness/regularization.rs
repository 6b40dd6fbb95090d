use rand_distr::{Distribution, StandardNormal};

use crate::emit::{Check, Plot, Summary, Table};
use crate::flow_model::{InitConfig, InitScheme};
use crate::graph::Env;
use crate::objectives::Objective;
use crate::oracle::{backward_uniform_flow, build_incidence, flow_entropy, max_entropy_flow, MaxEntOptions};
use crate::par;
use crate::trainer::{derive_seed, stream_rng, train, Checkpoints, NoiseConfig, SamplingMode, Schedule, TrainConfig, TrainContext};

use super::{fmt_key, EnvSpec, ExperimentSpec, HarnessError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbKlPoint {
    pub delta: f64,
    /// `sum_e rho(e) (J_F(e)/J_B(e) - 1)^2` with `rho = J_B / sum J_B`.
    pub l_db: f64,
    /// Generalized `KL(J_F || J_B)` of the joints scaled by `1 / sum J_B`.
    pub kl: f64,
    pub gap: f64,
}

/// Perturb the backward-uniform flow by `exp(delta * xi)` per edge and
/// compare the DB loss with twice the KL between forward and backward joints.
pub fn db_kl_gap(env: &Env, xi: &[f64], delta: f64) -> DbKlPoint {
    let dag = &env.dag;
    let base = backward_uniform_flow(dag, &env.rewards);
    let jf: Vec<f64> = base.iter().zip(xi).map(|(f, x)| f * (delta * x).exp()).collect();
    let mut node = env.rewards.per_state();
    for s in 0..dag.n_states() {
        if !dag.is_terminal(s) {
            node[s] = dag.out_edges(s).iter().map(|&e| jf[e]).sum();
        }
    }
    let jb: Vec<f64> = dag
        .edges()
        .iter()
        .map(|&(_, h)| node[h] / dag.in_edges(h).len() as f64)
        .collect();
    let total: f64 = jb.iter().sum();
    let (mut l_db, mut kl) = (0.0, 0.0);
    for (f, b) in jf.iter().zip(&jb) {
        let (p, q) = (f / total, b / total);
        let r = p / q;
        l_db += q * (r - 1.0) * (r - 1.0);
        kl += p * r.ln() - p + q;
    }
    DbKlPoint { delta, l_db, kl, gap: (l_db - 2.0 * kl).abs() }
}

/// FM entropy gap from several inits, and the DB-versus-KL ratio test.
pub fn run_regularization(spec: &ExperimentSpec) -> Result<Summary, HarnessError> {
    let env_spec = spec.env_or(EnvSpec::Diamond { reward: 1.0 });
    let env = env_spec.build()?;
    let n_random: usize = spec.one("inits", 8)?;
    let width: f64 = spec.one("init_width", 1.0)?;
    let steps: usize = spec.one("steps", 20_000)?;
    let eta0: f64 = spec.one("eta0", 0.1)?;
    let tol: f64 = spec.one("maxent_tol", 1e-3)?;
    let mut deltas: Vec<f64> = spec.list("delta", &[0.0, 0.1, 0.05, 0.025])?;
    let mut summary = Summary::new("regularization");

    // FM study
    let sys = build_incidence(&env.dag, &env.rewards);
    let opts = MaxEntOptions::default();
    let maxent = max_entropy_flow(&sys, &env.dag, opts.tol, opts.max_iters)?;
    let z = env.rewards.z_r();
    let ctx = TrainContext::with_reference(&env, None, maxent.edge_flows.clone());
    let inits: Vec<(String, InitConfig)> = std::iter::once(("zero".to_string(), InitConfig::default()))
        .chain((0..n_random).map(|k| {
            (format!("uniform{k}"), InitConfig { w: InitScheme::Uniform { half_width: width }, zeta: None })
        }))
        .collect();
    let runs = par::map(&inits.iter().enumerate().collect::<Vec<_>>(), |&(k, (_, init))| {
        let mut cfg = TrainConfig::new(Objective::Fm, Schedule::Constant, eta0, steps);
        cfg.sampling = SamplingMode::Exhaustive;
        cfg.init = *init;
        cfg.seed = derive_seed(spec.base_seed, k as u64);
        train(&env, &ctx, &cfg, NoiseConfig::none(), Checkpoints::Geometric)
    });
    let mut fm = Table::new("fm_gap", &["init", "entropy_gap", "residual", "max_abs_diff", "final_loss"]);
    let mut gaps = Vec::new();
    for ((name, _), r) in inits.iter().zip(runs) {
        let rec = match r {
            Ok(rec) => rec,
            Err(e) => {
                summary.failed_cells.push(format!("fm/{name}: {e}"));
                continue;
            }
        };
        let flows: Vec<f64> = rec.final_params.w().iter().map(|w| w.exp()).collect();
        let gap = maxent.entropy - flow_entropy(&flows, z);
        let residual = sys.residual_inf(&flows);
        let diff = flows.iter().zip(&maxent.edge_flows).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        fm.push(vec![name.as_str().into(), gap.into(), residual.into(), diff.into(), rec.last().loss.into()]);
        gaps.push(gap);
        if name == "zero" {
            let check = if env_spec.is_symmetric() { Check::asserted } else { Check::info };
            summary.checks.push(check(
                "fm_zero_init_matches_maxent",
                diff <= tol,
                diff,
                tol,
                "max |f - f_maxent| after FM training from the zero init",
            ));
        }
        summary.runs.push(crate::emit::CellRun { key: format!("fm_{name}"), rows: rec.rows });
    }
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    let mut gap_plot = Plot::new("fm_gap", "rank", "entropy gap", false, false);
    gap_plot.add("gap", sorted.iter().enumerate().map(|(i, g)| ((i + 1) as f64, *g)).collect());

    // DB study
    let mut rng = stream_rng(derive_seed(spec.base_seed, 10_000), 0);
    let xi: Vec<f64> = (0..env.dag.n_edges()).map(|_| StandardNormal.sample(&mut rng)).collect();
    deltas.sort_by(|a, b| b.total_cmp(a));
    let mut db = Table::new("db_kl", &["delta", "l_db", "kl", "gap", "gap_over_delta2"]);
    let mut db_plot = Plot::new("db_kl", "delta", "|L_DB - 2 KL| / delta^2", true, true);
    let points: Vec<DbKlPoint> = deltas.iter().map(|&d| db_kl_gap(&env, &xi, d)).collect();
    let mut scaled = Vec::new();
    for p in &points {
        let s = if p.delta > 0.0 { p.gap / (p.delta * p.delta) } else { 0.0 };
        db.push(vec![p.delta.into(), p.l_db.into(), p.kl.into(), p.gap.into(), s.into()]);
        if p.delta == 0.0 {
            summary.checks.push(Check::asserted(
                "db_zero_delta",
                p.l_db == 0.0 && p.kl == 0.0,
                p.l_db.max(p.kl),
                0.0,
                "exact detailed balance gives zero loss and zero KL",
            ));
        } else {
            scaled.push((p.delta, s));
        }
    }
    for w in scaled.windows(2) {
        let ((d0, s0), (d1, s1)) = (w[0], w[1]);
        if (2.0 * d1 - d0).abs() <= 1e-12 * d0 {
            summary.checks.push(Check::asserted(
                format!("db_ratio_halving_{}", fmt_key(d1)),
                s1 <= 0.6 * s0,
                s1,
                0.6 * s0,
                "|L_DB - 2 KL| / delta^2 at delta/2 at most 0.6 times its value at delta",
            ));
        }
    }
    db_plot.add("gap/delta^2", scaled.clone());
    summary.notes.push("DB study weights edges by the normalized backward joint".into());
    summary.tables.push(fm);
    summary.tables.push(db);
    summary.plots.push(gap_plot);
    summary.plots.push(db_plot);
    Ok(summary)
}
