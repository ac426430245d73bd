//! `seldyn` experiment runner.
//!
//! Exit codes: 0 success, 2 config or file error, 3 non-convergence or
//! divergence, 4 precondition violation.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "seldyn", version, about = "Continuum residual network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the forward problem and write trajectory, Lyapunov trace and growth fit.
    Forward(RunArgs),
    /// Train the controls with the proximal point or maximum-principle method.
    Train(RunArgs),
    /// Steady-state, spectral and rank-one stability analysis.
    Analyze(RunArgs),
    /// Compare adjoint gradients with finite differences.
    Gradcheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    verbose: bool,
}

fn threads() -> Result<usize, CliError> {
    match std::env::var("SELDYN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::config(format!("SELDYN_THREADS must be a positive integer, got '{v}'"))),
    }
}

fn run(name: &str, args: &RunArgs) -> Result<i32, CliError> {
    let n = threads()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(e.to_string()))?;

    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(out) = &args.out {
        cfg.output = std::path::absolute(out).map_err(|e| CliError::config(format!("{}: {e}", out.display())))?;
    }
    let setup = cfg.assemble()?;
    let mut out = commands::Run::new(&cfg.output)?;
    let outcome = match name {
        "forward" => commands::forward(&cfg, &setup, &mut out),
        "train" => commands::train_cmd(&cfg, &setup, &mut out),
        "analyze" => commands::analyze(&cfg, &setup, &mut out),
        _ => commands::gradcheck(&cfg, &setup, &mut out),
    }?;
    let report = out.finish(name, outcome.exit_code, &cfg, outcome.outputs)?;
    println!("{}", cfg.output.join("report.json").display());
    Ok(report.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Forward(a) => ("forward", a),
        Command::Train(a) => ("train", a),
        Command::Analyze(a) => ("analyze", a),
        Command::Gradcheck(a) => ("gradcheck", a),
    };
    let level = if args.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(name, args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
