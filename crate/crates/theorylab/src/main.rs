use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use theorylab_core::emit::{emit, Formats};
use theorylab_core::graph::GridReward;
use theorylab_core::harness::{run, EnvSpec, ExperimentId, ExperimentSpec};

/// Run one GFlowNet theory experiment and write CSV/SVG artifacts plus
/// `verdict.json`. Exit status: 0 when every asserted check passes, 2 when
/// one fails, 1 on error.
#[derive(Debug, Parser)]
#[command(name = "theorylab", version)]
struct Cli {
    /// convergence, sample_complexity, order, error_accum, noise_objective,
    /// noise_drift, noise_sample_ratio, regularization or audit
    experiment: ExperimentId,

    /// chain, grid, v2, diamond, asym-diamond or file:PATH; omitted means
    /// the experiment's default environment
    #[arg(long)]
    env: Option<String>,

    #[arg(long, default_value_t = 4)]
    length: usize,
    /// Reward for chain and diamond terminals
    #[arg(long, default_value_t = 2.0)]
    reward: f64,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    side: usize,
    /// uniform, corner or center
    #[arg(long, default_value = "corner")]
    landscape: GridReward,
    /// First terminal reward for v2 and asym-diamond
    #[arg(long, default_value_t = 1.0)]
    r1: f64,
    /// Second terminal reward for v2 and asym-diamond
    #[arg(long, default_value_t = 3.0)]
    r2: f64,

    /// Swept or fixed parameter, `KEY=v1,v2,...`; repeatable
    #[arg(long = "grid", value_parser = parse_grid)]
    grid: Vec<(String, Vec<String>)>,

    /// Seeds per cell; 0 keeps the experiment default
    #[arg(long, default_value_t = 0)]
    seeds: usize,
    #[arg(long, value_delimiter = ',')]
    sigma2: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,

    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "csv,svg")]
    formats: Formats,
    /// Base seed; per-seed streams derive from it
    #[arg(long = "seed", default_value_t = 0)]
    base_seed: u64,
}

fn parse_grid(s: &str) -> Result<(String, Vec<String>), String> {
    let (key, vals) = s.split_once('=').ok_or_else(|| format!("expected KEY=v1,v2,... in '{s}'"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(format!("empty key in '{s}'"));
    }
    let vals: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if vals.is_empty() {
        return Err(format!("no values for '{key}'"));
    }
    Ok((key.to_string(), vals))
}

fn env_spec(cli: &Cli) -> Result<Option<EnvSpec>, String> {
    let Some(name) = cli.env.as_deref() else { return Ok(None) };
    if let Some(path) = name.strip_prefix("file:") {
        return Ok(Some(EnvSpec::File { path: path.into() }));
    }
    Ok(Some(match name {
        "chain" => EnvSpec::Chain { length: cli.length, reward: cli.reward },
        "grid" => EnvSpec::Grid { dim: cli.dim, side: cli.side, landscape: cli.landscape },
        "v2" => EnvSpec::V2 { r1: cli.r1, r2: cli.r2 },
        "diamond" => EnvSpec::Diamond { reward: cli.reward },
        "asym-diamond" => EnvSpec::AsymDiamond { r_t: cli.r1, r_t2: cli.r2 },
        other => return Err(format!("unknown environment '{other}'")),
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env = match env_spec(&cli) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let mut spec = ExperimentSpec::new(cli.experiment)
        .with_seeds(cli.seeds)
        .with_sigma2(&cli.sigma2)
        .with_eps(&cli.eps)
        .with_base_seed(cli.base_seed);
    spec.env = env;
    for (k, v) in &cli.grid {
        spec.grid.insert(k.clone(), v.clone());
    }

    let summary = match run(&spec) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = emit(&summary, &cli.out, cli.formats) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    for c in &summary.checks {
        let tag = match (c.passed, c.asserted) {
            (true, true) => "pass",
            (false, true) => "FAIL",
            (true, false) => "info",
            (false, false) => "info!",
        };
        println!("{tag:5} {} value={:.6e} bound={:.6e}  {}", c.name, c.value, c.bound, c.detail);
    }
    for n in &summary.notes {
        println!("note  {n}");
    }
    for f in &summary.failed_cells {
        println!("cell failed: {f}");
    }
    println!("{} -> {}", summary.experiment, cli.out.display());
    if summary.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
