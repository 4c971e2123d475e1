//! Experiment runner: parse a config, generate data, identify, close the
//! loop, and write the trace, model, and summary files.
//!
//! Exit codes: 0 success, 2 configuration error, 3 solver failure.

mod config;
mod experiments;
mod model_io;
mod trace;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use experiments::{Mode, RunError};

#[derive(Parser)]
#[command(
    name = "dmpc",
    about = "Data-driven MPC experiments: identification and receding-horizon control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full experiment: identify, close the loop, write outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides experiment.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the configuration schema without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Identification only: write the model file and summary.
    Ident {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Open-loop model check: identify, then compare the model rollout to
    /// the measured record.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (config_path, out, seed, mode) = match &cli.command {
        Command::Run { config, out, seed } => (config, out.clone(), *seed, Mode::Run),
        Command::Validate { config } => {
            return match config::load(config) {
                Ok(cfg) => {
                    println!("ok: valid {} experiment", cfg.experiment.kind);
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(2)
                }
            };
        }
        Command::Ident { config, out, seed } => (config, out.clone(), *seed, Mode::Ident),
        Command::Simulate { config, out, seed } => (config, out.clone(), *seed, Mode::Simulate),
    };

    let cfg = match config::load(config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let kind = config::kind_of(&cfg);
    let seed = seed.unwrap_or(cfg.experiment.seed);
    let out_dir = out.unwrap_or_else(|| {
        PathBuf::from(
            cfg.experiment
                .out_dir
                .clone()
                .unwrap_or_else(|| format!("out/{kind}")),
        )
    });
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        eprintln!("io error: cannot create {}: {e}", out_dir.display());
        return ExitCode::FAILURE;
    }

    match experiments::execute(&cfg, kind, &out_dir, seed, mode) {
        Ok(summary) => {
            println!(
                "{kind}: done, outputs in {} (runtime {:.2}s)",
                out_dir.display(),
                summary["runtime_seconds"].as_f64().unwrap_or(f64::NAN)
            );
            if let Some(v) = summary.get("validation_rmse_fraction_of_range") {
                println!("  validation rmse: {:.3}% of output range", 100.0 * v.as_f64().unwrap_or(f64::NAN));
            }
            if let Some(cl) = summary.get("closed_loop") {
                if let Some(err) = cl.get("final_tracking_error") {
                    println!("  final tracking error: {:.6}", err.as_f64().unwrap_or(f64::NAN));
                }
                if let Some(q) = cl.get("quadrant_terminal_errors") {
                    println!("  quadrant terminal errors: {q}");
                }
            }
            if let Some(r) = summary.get("state_norm_ratio_at_20") {
                println!("  |x_20| / |x_0| = {:.4}", r.as_f64().unwrap_or(f64::NAN));
            }
            ExitCode::SUCCESS
        }
        Err(RunError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(RunError::Solver(e)) => {
            eprintln!("solver error: {e}");
            ExitCode::from(3)
        }
        Err(RunError::Io(e)) => {
            eprintln!("io error: {e}");
            ExitCode::FAILURE
        }
    }
}
