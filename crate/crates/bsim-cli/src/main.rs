//! Command-line front door for the Bayesian shape-invariant growth model:
//! `fit`, `simulate`, `diagnose`, `compare`, `curves`.
//!
//! Exit codes: 0 success, 1 error, 2 success with convergence warnings.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bsim",
    about = "Bayesian shape-invariant (SITAR-style) growth curve modeling",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a dataset and write posterior draws + diagnostics
    Fit(CommonArgs),
    /// Generate a synthetic cohort from a configured truth
    Simulate(CommonArgs),
    /// Convergence/mixing diagnostics over a previous fit
    Diagnose(CommonArgs),
    /// DIC family comparison and BIC knot scan
    Compare(CommonArgs),
    /// Mean/velocity curves, APV, subject curves, effects tables
    Curves(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides [output].dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Chain-count override
    #[arg(long)]
    chains: Option<usize>,
    /// Worker thread count (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit 2; keep 2 reserved for convergence warnings.
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    let (name, args) = match &cli.command {
        Command::Fit(a) => ("fit", a),
        Command::Simulate(a) => ("simulate", a),
        Command::Diagnose(a) => ("diagnose", a),
        Command::Compare(a) => ("compare", a),
        Command::Curves(a) => ("curves", a),
    };
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    let mut cfg = config::load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.mcmc.seed = seed;
    }
    if let Some(chains) = args.chains {
        cfg.mcmc.chains = chains;
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    match name {
        "fit" => commands::fit::run(&cfg, &args.config, &out_dir),
        "simulate" => commands::simulate::run(&cfg, &args.config, &out_dir),
        "diagnose" => commands::diagnose::run(&cfg, &args.config, &out_dir),
        "compare" => commands::compare::run(&cfg, &args.config, &out_dir),
        "curves" => commands::curves::run(&cfg, &args.config, &out_dir),
        _ => unreachable!(),
    }
}
