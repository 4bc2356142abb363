//! Library backing the `recobound` batch front end; the binary is a thin
//! argument-parsing wrapper so tests can drive commands directly.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use recobound::Error;

pub use commands::{
    cmd_boundary1d, cmd_gsweep, cmd_margin, cmd_simulate, cmd_trace2d, cmd_validate, Outcome,
};
pub use config::{Scenario, ScenarioConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Gsweep,
    Boundary1d,
    Trace2d,
    Margin,
    Validate,
}

/// Exit status per the interface contract: 0 success, 2 configuration error,
/// 3 numerical/solver failure.
pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::UnknownModel(_) | Error::BadOverride(_) => 2,
        _ => 3,
    }
}

/// Loads, resolves, and runs one command; writes artifacts under `out_dir`
/// (which defaults to the config's `output_dir`, then `"out"`).
pub fn run(
    command: Command,
    config_path: &Path,
    out_dir: Option<&Path>,
) -> Result<Outcome, Error> {
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read config: {e}")))?;
    let config = ScenarioConfig::parse_json(&text)?;
    let out: PathBuf = match out_dir {
        Some(d) => d.to_path_buf(),
        None => PathBuf::from(config.output_dir.clone().unwrap_or_else(|| "out".into())),
    };
    let scenario = Scenario::resolve(config)?;
    let result = match command {
        Command::Simulate => commands::cmd_simulate(&scenario, &out),
        Command::Gsweep => commands::cmd_gsweep(&scenario, &out),
        Command::Boundary1d => commands::cmd_boundary1d(&scenario, &out),
        Command::Trace2d => commands::cmd_trace2d(&scenario, &out),
        Command::Margin => commands::cmd_margin(&scenario, &out),
        Command::Validate => commands::cmd_validate(&scenario, &out),
    };
    if let Err(e) = &result {
        if exit_code_for(e) == 3 {
            commands::write_error_artifact(&out, &scenario.config.hash(), e);
        }
    }
    result
}
