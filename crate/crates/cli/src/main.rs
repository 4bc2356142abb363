use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use recobound_cli::{exit_code_for, run, Command};

/// Recovery boundaries and safety margins for switched differential-algebraic
/// models, computed from inverse trajectory sensitivities.
#[derive(Parser)]
#[command(name = "recobound", version, about)]
struct Cli {
    /// Scenario configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory; defaults to the config's `output_dir`, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for concurrent evaluations (gsweep points, gradient
    /// re-simulations).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate the nominal scenario and persist trajectory, sensitivity,
    /// H-timeseries, and recovery-classification artifacts.
    Simulate,
    /// Evaluate G over a 1-D parameter sweep.
    Gsweep,
    /// Newton search for the recovery boundary point of a one-parameter
    /// scenario.
    Boundary1d,
    /// Predictor-corrector trace of the boundary curve in a two-parameter
    /// scenario.
    Trace2d,
    /// Closest boundary point and safety margin in an N-parameter scenario.
    Margin,
    /// Structural validation of the model and parameter space.
    Validate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(config) = cli.config.as_deref() else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    if let Some(jobs) = cli.jobs {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized; --jobs ignored");
        }
    }
    let command = match cli.command {
        Sub::Simulate => Command::Simulate,
        Sub::Gsweep => Command::Gsweep,
        Sub::Boundary1d => Command::Boundary1d,
        Sub::Trace2d => Command::Trace2d,
        Sub::Margin => Command::Margin,
        Sub::Validate => Command::Validate,
    };
    match run(command, config, cli.out.as_deref()) {
        Ok(outcome) => {
            for path in outcome.artifacts {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
