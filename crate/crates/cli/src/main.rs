//! Command-line driver for the qfeel pipeline.
//!
//! Verbs: `pipeline` (end to end), `fit` (probe training + gap-curve fit),
//! `optimize` (joint quantization/bandwidth plan), `sweep` (simulated
//! time-to-target over levels), `oracle` (integer brute-force sweep of the
//! predicted time). Exit codes: 0 success, 2 config error, 3 infeasible
//! instance, 4 fit failure, 5 non-convergence.

use clap::{Args, Parser, Subcommand};
use qfeel::fitting::GapFit;
use qfeel::pipeline::{self, PipelineError};
use qfeel::scenario::ScenarioConfig;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "qfeel", version, about = "Quantized federated edge learning: simulate, fit, and minimize training time")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole experiment: generate data, probe-train, fit the gap
    /// curve, optimize quantization and bandwidth, validate by simulation.
    Pipeline(CommonArgs),
    /// Probe training at the two probe levels and fit the gap curve.
    Fit(CommonArgs),
    /// Compute the joint quantization/bandwidth plan from a fit.
    Optimize(StageArgs),
    /// Simulate time-to-target across the configured quantization levels.
    Sweep(StageArgs),
    /// Brute-force the predicted total time over integer levels 2..=64.
    Oracle(StageArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario config JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Existing fit.json; when omitted the fit stage runs first.
    #[arg(long)]
    fit: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Pipeline(args) => {
            let cfg = resolve_config(&args)?;
            let artifact = pipeline::run_pipeline(&cfg, Some(&args.out))?;
            println!(
                "q* = {}, T_d = {} s, N_eps = {}, T = {} s",
                artifact.plan.q,
                artifact.plan.round_deadline_s,
                artifact.plan.predicted_rounds,
                artifact.plan.predicted_total_s
            );
            println!("artifacts in {}", args.out.display());
        }
        Command::Fit(args) => {
            let cfg = resolve_config(&args)?;
            let (_, _, fit) = pipeline::run_fit_stage(&cfg, Some(&args.out))?;
            println!(
                "fit: A={} B={} C={} D={} Z={}",
                fit.a, fit.b, fit.c, fit.d, fit.z
            );
        }
        Command::Optimize(args) => {
            let cfg = resolve_config(&args.common)?;
            let fit = resolve_fit(&cfg, &args, &args.common.out)?;
            let plan = pipeline::run_optimize_stage(&cfg, &fit, Some(&args.common.out))?;
            println!(
                "q* = {}, T_d = {} s, N_eps = {}, T = {} s",
                plan.q, plan.round_deadline_s, plan.predicted_rounds, plan.predicted_total_s
            );
        }
        Command::Sweep(args) => {
            let cfg = resolve_config(&args.common)?;
            let fit = resolve_fit(&cfg, &args, &args.common.out)?;
            let points = pipeline::run_sweep_stage(&cfg, &fit, Some(&args.common.out))?;
            for p in &points {
                match (p.rounds, p.total_s) {
                    (Some(r), Some(t)) => println!("q={} T_d={} rounds={} T={}", p.q, p.t_d_s, r, t),
                    _ => println!("q={} T_d={} target not reached", p.q, p.t_d_s),
                }
            }
        }
        Command::Oracle(args) => {
            let cfg = resolve_config(&args.common)?;
            let fit = resolve_fit(&cfg, &args, &args.common.out)?;
            let points = pipeline::run_oracle_stage(&cfg, &fit, Some(&args.common.out))?;
            if let Some(best) = qfeel::optimizer::best_sweep_point(&points) {
                println!(
                    "best q = {} with predicted T = {} s over {} levels",
                    best.q,
                    best.t_total_s,
                    points.len()
                );
            }
        }
    }
    Ok(())
}

fn resolve_config(args: &CommonArgs) -> Result<ScenarioConfig, PipelineError> {
    let mut cfg = pipeline::load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_fit(
    cfg: &ScenarioConfig,
    args: &StageArgs,
    out: &Path,
) -> Result<GapFit, PipelineError> {
    match &args.fit {
        Some(path) => pipeline::load_fit(path),
        None => pipeline::run_fit_stage(cfg, Some(out)).map(|(_, _, fit)| fit),
    }
}
