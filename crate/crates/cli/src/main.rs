use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use eril_core::check::{experiment_checks, property_checks, CheckOutcome};
use eril_core::eval::{metrics_csv, prepare, run_experiment, run_file_name, run_sweep, ExperimentConfig, MetricRow};
use eril_core::mdp::TabularMdp;
use eril_core::oracle::{save_csv, solve_default, support_baselines};
use eril_core::train::{init_state, resume, TrainSetup, Variant};
use eril_core::RegularizationConfig;

/// Entropy-regularized imitation learning experiments on tabular tasks.
#[derive(Parser)]
#[command(name = "eril", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the regularized Bellman equation of an MDP file exactly.
    Solve(SolveArgs),
    /// Generate the expert and held-out test transitions of an experiment.
    Expert(ExperimentArgs),
    /// Train one variant with one seed.
    Train(TrainArgs),
    /// Train every variant and seed and summarize.
    Compare(ExperimentArgs),
    /// Final return against the number of expert trajectories.
    SweepExpert(ExperimentArgs),
    /// Run the property suites, plus the comparison checks with --config.
    Check(CheckArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// MDP description (TOML, tagged by `kind`).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    kappa: f64,
    #[arg(long, default_value_t = 2.0)]
    eta: f64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the seed list (or the expert seed for `expert`).
    #[arg(long)]
    seed: Option<u64>,
    /// Restricts the run to one variant.
    #[arg(long)]
    variant: Option<Variant>,
    /// Also write SVG charts.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// Experiment config for the determinism, efficiency and NLL checks.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scratch directory for the comparison runs.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_experiment(args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(v) = args.variant {
        cfg.variants = vec![v];
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn solve(args: &SolveArgs) -> Result<()> {
    let mdp = TabularMdp::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    let reg = RegularizationConfig::new(args.kappa, args.eta, mdp.discount())?;
    let (q0, b0) = support_baselines(&mdp)?;
    let res = solve_default(&mdp, &q0, &b0, &reg)?;
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("oracle.csv");
    save_csv(&path, &res, &mdp, &q0, &b0, &reg)?;
    println!(
        "converged in {} iterations (residual {:.2e}), beta = {}",
        res.iterations,
        res.residual,
        reg.beta()
    );
    for (x, v) in res.values.v.iter().enumerate() {
        let pi: Vec<String> = res.expert_policy.row(x).iter().map(|p| format!("{p:.3}")).collect();
        println!("V({x}) = {v:.6}  pi = [{}]", pi.join(", "));
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn expert(args: &ExperimentArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.expert_seed = s;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let prep = prepare(&cfg, cfg.expert_trajectories)?;
    std::fs::create_dir_all(&out)?;
    prep.expert.write_csv(out.join("expert.csv"))?;
    prep.test.write_csv(out.join("test.csv"))?;
    println!(
        "{} expert and {} test transitions in {}; expert return R_max = {:.4}",
        prep.expert.len(),
        prep.test.len(),
        out.display(),
        prep.r_max
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let prep = prepare(&cfg, cfg.expert_trajectories)?;
    let setup = TrainSetup {
        env: &prep.env,
        expert: &prep.expert,
        test: Some(&prep.test),
        cfg: prep.reg,
        schedule: cfg.schedule.clone(),
        return_range: (cfg.r_min, prep.r_max),
    };
    let run = resume(init_state(args.variant, &setup, args.seed)?, &setup)?;
    for w in &run.warnings {
        eprintln!("warning: {w}");
    }
    let rows: Vec<MetricRow> = run.reports().iter().map(MetricRow::from_report).collect();
    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv = cfg.out_dir.join(run_file_name(args.variant, args.seed));
    std::fs::write(&csv, metrics_csv(&rows))?;
    let checkpoint = csv.with_extension("json");
    run.state.save(&checkpoint)?;
    for r in &rows {
        println!(
            "iter {:>3}  real {:>6}  normalized return {:.3}",
            r.iteration, r.real_interactions, r.normalized_return
        );
    }
    println!("wrote {} and {}", csv.display(), checkpoint.display());
    if let Some(d) = run.divergence {
        bail!("training diverged: {d}");
    }
    Ok(())
}

fn compare(args: &ExperimentArgs) -> Result<()> {
    let cfg = load_experiment(args)?;
    let out = run_experiment(&cfg, args.svg)?;
    for r in &out.runs {
        for w in &r.warnings {
            eprintln!("warning ({} seed {}): {w}", r.variant, r.seed);
        }
        if let Some(d) = &r.divergence {
            eprintln!("diverged ({} seed {}): {d}", r.variant, r.seed);
        }
    }
    println!("{} runs, R_max = {:.4}", out.runs.len(), out.r_max);
    print!("{}", std::fs::read_to_string(&out.summary_file)?);
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}

fn sweep(args: &ExperimentArgs) -> Result<()> {
    let cfg = load_experiment(args)?;
    let out = run_sweep(&cfg, args.svg)?;
    println!("wrote {}", out.sweep_file.display());
    if let Some(svg) = out.svg_file {
        println!("wrote {}", svg.display());
    }
    Ok(())
}

fn print_outcomes(outcomes: &[CheckOutcome]) -> bool {
    for o in outcomes {
        println!("{o}");
    }
    outcomes.iter().all(|o| o.passed)
}

fn check(args: &CheckArgs) -> Result<bool> {
    let mut ok = print_outcomes(&property_checks());
    if let Some(path) = &args.config {
        let mut cfg = ExperimentConfig::load(path)?;
        let scratch = args.out.clone().unwrap_or_else(|| std::env::temp_dir().join("eril-check"));
        cfg.out_dir = scratch.join("first");
        ok &= print_outcomes(&experiment_checks(&cfg, &scratch.join("rerun"))?);
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(a) => solve(a).map(|_| true),
        Command::Expert(a) => expert(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Compare(a) => compare(a).map(|_| true),
        Command::SweepExpert(a) => sweep(a).map(|_| true),
        Command::Check(a) => check(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
