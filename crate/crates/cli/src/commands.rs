//! Batch commands: each loads a resolved scenario, runs, and persists
//! deterministic artifacts (comma-separated CSV with `%.12e` floats and a
//! provenance header; JSON with an embedded provenance block).

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;

use recobound::hybrid_model::validate;
use recobound::text::{format_e, push_float_row};
use recobound::{
    classify_recovery, evaluate_g, evaluate_g_detailed, find_boundary_1d, safety_margin_nd,
    trace_boundary_2d, trajectory_to_json, Error, SimulationProblem, TraceDirection,
};

use crate::config::Scenario;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
}

fn provenance_line(hash: &str) -> String {
    format!("# config_hash={hash} tool_version={TOOL_VERSION}\n")
}

fn provenance_json(hash: &str) -> serde_json::Value {
    json!({ "config_hash": hash, "tool_version": TOOL_VERSION })
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::InvalidConfig(format!("cannot create output dir: {e}")))?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| Error::InvalidConfig(format!("cannot write {name}: {e}")))?;
    Ok(path)
}

fn write_json(
    dir: &Path,
    name: &str,
    hash: &str,
    mut value: serde_json::Value,
) -> Result<PathBuf, Error> {
    if let Some(obj) = value.as_object_mut() {
        obj.insert("provenance".into(), provenance_json(hash));
    }
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::InvalidConfig(format!("serialization failed: {e}")))?;
    write_artifact(dir, name, &format!("{text}\n"))
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<serde_json::Value, Error> {
    serde_json::to_value(v).map_err(|e| Error::InvalidConfig(format!("serialization failed: {e}")))
}

/// Persists the diagnostic for a numerically failed command (exit code 3).
pub fn write_error_artifact(dir: &Path, hash: &str, err: &Error) -> Option<PathBuf> {
    write_json(dir, "error.json", hash, json!({ "error": err.to_string() })).ok()
}

pub fn cmd_validate(sc: &Scenario, out: &Path) -> Result<Outcome, Error> {
    let hash = sc.config.hash();
    let report = validate(&sc.bundle.definition, &sc.space);
    let path = write_json(
        out,
        "validation.json",
        &hash,
        json!({
            "model": sc.bundle.metadata,
            "ok": report.ok(),
            "entries": report.entries,
        }),
    )?;
    if !report.ok() {
        return Err(Error::InvalidConfig(format!(
            "model validation failed: {}",
            report
                .errors()
                .map(|e| e.message.clone())
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    Ok(Outcome {
        artifacts: vec![path],
    })
}

pub fn cmd_simulate(sc: &Scenario, out: &Path) -> Result<Outcome, Error> {
    let hash = sc.config.hash();
    let p = sc.space.nominal().to_vec();
    let (eval, sens) = evaluate_g_detailed(
        &sc.bundle.definition,
        &sc.bundle.schedule,
        &sc.space,
        &p,
        &sc.mask,
        &sc.integration,
        &sc.recovery,
        false,
    )?;

    let mut artifacts = Vec::new();
    let line = provenance_line(&hash);
    artifacts.push(write_artifact(
        out,
        "trajectory.csv",
        &format!("{line}{}", sens.trajectory.to_csv()),
    )?);
    artifacts.push(write_json(
        out,
        "trajectory.json",
        &hash,
        trajectory_to_json(&sens.trajectory),
    )?);
    artifacts.push(write_artifact(
        out,
        "sensitivity.csv",
        &format!("{line}{}", sens.to_csv()),
    )?);
    artifacts.push(write_artifact(
        out,
        "h_timeseries.csv",
        &format!("{line}{}", eval.h_timeseries_csv()),
    )?);
    artifacts.push(write_json(out, "recovery.json", &hash, to_value(&eval)?)?);
    Ok(Outcome { artifacts })
}

pub fn cmd_gsweep(sc: &Scenario, out: &Path) -> Result<Outcome, Error> {
    let hash = sc.config.hash();
    let sweep = sc
        .config
        .sweep
        .clone()
        .ok_or_else(|| Error::InvalidConfig("gsweep requires a `sweep` section".into()))?;
    if sweep.points < 2 {
        return Err(Error::InvalidConfig("sweep needs at least 2 points".into()));
    }
    if sweep.max <= sweep.min {
        return Err(Error::InvalidConfig("sweep range must satisfy min < max".into()));
    }
    // The sweep varies exactly one named parameter; the rest stay at their
    // baseline values.
    let sweep_space = sc.space.restrict(&[sweep.parameter.as_str()])?;

    let values: Vec<f64> = (0..sweep.points)
        .map(|k| sweep.min + (sweep.max - sweep.min) * k as f64 / (sweep.points - 1) as f64)
        .collect();
    let rows: Vec<(f64, Result<recobound::GEvaluation, Error>)> = values
        .par_iter()
        .map(|v| {
            (
                *v,
                evaluate_g(
                    &sc.bundle.definition,
                    &sc.bundle.schedule,
                    &sweep_space,
                    &[*v],
                    &sc.mask,
                    &sc.integration,
                    &sc.recovery,
                    false,
                ),
            )
        })
        .collect();

    let mut csv = provenance_line(&hash);
    csv.push_str("p,g,t_hat,recovered,status\n");
    for (v, row) in &rows {
        match row {
            Ok(eval) => {
                let mut line = String::new();
                push_float_row(&mut line, &[], &[*v, eval.g_value, eval.t_hat]);
                let line = line.trim_end();
                csv.push_str(&format!("{line},{},ok\n", eval.recovered));
            }
            Err(e) => {
                // Per-point failures become flagged rows; the sweep continues.
                csv.push_str(&format!(
                    "{},nan,nan,false,error: {}\n",
                    format_e(*v),
                    e.to_string().replace(',', ";")
                ));
            }
        }
    }
    let path = write_artifact(out, "gsweep.csv", &csv)?;
    Ok(Outcome {
        artifacts: vec![path],
    })
}

fn start_vector(sc: &Scenario, expected: usize) -> Result<Vec<f64>, Error> {
    match &sc.config.solver.start {
        Some(v) => {
            if v.len() != expected {
                return Err(Error::InvalidConfig(format!(
                    "solver.start has {} entries, expected {expected}",
                    v.len()
                )));
            }
            Ok(v.clone())
        }
        None => Ok(sc.space.nominal().to_vec()),
    }
}

pub fn cmd_boundary1d(sc: &Scenario, out: &Path) -> Result<Outcome, Error> {
    let hash = sc.config.hash();
    if sc.space.dim() != 1 {
        return Err(Error::InvalidConfig(format!(
            "boundary1d requires exactly one selected parameter, got {}",
            sc.space.dim()
        )));
    }
    let start = start_vector(sc, 1)?[0];
    let problem = SimulationProblem::new(
        &sc.bundle.definition,
        &sc.bundle.schedule,
        &sc.space,
        sc.integration.clone(),
        sc.recovery.clone(),
    )
    .with_mask(sc.mask.clone());
    let result = find_boundary_1d(&problem, start, &sc.solver)?;

    let mut csv = provenance_line(&hash);
    csv.push_str("iterate,p,g,dg,recovered,mu,failed\n");
    for (k, it) in result.iterates.iter().enumerate() {
        let dg = it.dg.as_ref().map(|d| d[0]).unwrap_or(f64::NAN);
        csv.push_str(&format!(
            "{k},{},{},{},{},{},{}\n",
            format_e(it.p[0]),
            format_e(it.g),
            format_e(dg),
            it.recovered,
            format_e(it.mu),
            it.failed
        ));
    }
    let mut artifacts = Vec::new();
    artifacts.push(write_artifact(out, "boundary1d_iterates.csv", &csv)?);
    artifacts.push(write_json(out, "boundary1d.json", &hash, to_value(&result)?)?);
    Ok(Outcome { artifacts })
}

pub fn cmd_trace2d(sc: &Scenario, out: &Path) -> Result<Outcome, Error> {
    let hash = sc.config.hash();
    if sc.space.dim() != 2 {
        return Err(Error::InvalidConfig(format!(
            "trace2d requires exactly two selected parameters, got {}",
            sc.space.dim()
        )));
    }
    let start = sc.config.solver.start.clone().ok_or_else(|| {
        Error::InvalidConfig(
            "trace2d requires solver.start: a point on the recovery boundary (run boundary1d \
             first)"
                .into(),
        )
    })?;
    if start.len() != 2 {
        return Err(Error::InvalidConfig("solver.start must have 2 entries".into()));
    }
    let kappa = sc.config.solver.kappa.unwrap_or(0.02);
    let n_points = sc.config.solver.n_points.unwrap_or(50);
    let direction = match sc.config.solver.direction.as_deref() {
        None | Some("positive") | Some("+") => TraceDirection::Positive,
        Some("negative") | Some("-") => TraceDirection::Negative,
        Some(other) => {
            return Err(Error::InvalidConfig(format!(
                "unknown trace direction `{other}`"
            )))
        }
    };
    let problem = SimulationProblem::new(
        &sc.bundle.definition,
        &sc.bundle.schedule,
        &sc.space,
        sc.integration.clone(),
        sc.recovery.clone(),
    )
    .with_mask(sc.mask.clone());
    let trace = trace_boundary_2d(&problem, &start, kappa, n_points, direction, &sc.solver)?;

    let mut artifacts = Vec::new();
    artifacts.push(write_artifact(
        out,
        "trace2d.csv",
        &format!("{}{}", provenance_line(&hash), trace.to_csv()),
    )?);
    artifacts.push(write_json(out, "trace2d.json", &hash, to_value(&trace)?)?);
    Ok(Outcome { artifacts })
}

pub fn cmd_margin(sc: &Scenario, out: &Path) -> Result<Outcome, Error> {
    let hash = sc.config.hash();
    let p0 = start_vector(sc, sc.space.dim())?;
    let weight = match &sc.config.solver.weight_matrix {
        Some(rows) => {
            let dim = sc.space.dim();
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::InvalidConfig(format!(
                    "weight_matrix must be {dim}x{dim}"
                )));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            Some(nalgebra::DMatrix::from_row_slice(dim, dim, &flat))
        }
        None => None,
    };
    let problem = SimulationProblem::new(
        &sc.bundle.definition,
        &sc.bundle.schedule,
        &sc.space,
        sc.integration.clone(),
        sc.recovery.clone(),
    )
    .with_mask(sc.mask.clone());
    let mut solver = sc.solver.clone();
    if sc.config.solver.max_iterations.is_none() {
        solver.max_iterations = 100;
    }
    let result = safety_margin_nd(&problem, &p0, weight.as_ref(), &solver)?;

    let mut artifacts = Vec::new();
    artifacts.push(write_artifact(
        out,
        "margin.csv",
        &format!("{}{}", provenance_line(&hash), result.to_csv()),
    )?);
    artifacts.push(write_json(out, "margin.json", &hash, to_value(&result)?)?);
    Ok(Outcome { artifacts })
}

/// True when the trajectory-classification helper deems the nominal scenario
/// recovered; surfaced for smoke checks.
pub fn nominal_recovered(sc: &Scenario) -> Result<bool, Error> {
    let p = sc.space.nominal().to_vec();
    match recobound::integrate(
        &sc.bundle.definition,
        &sc.bundle.schedule,
        &sc.space,
        &p,
        &sc.integration,
    ) {
        Ok(traj) => {
            let x_sep = traj.x_sep.clone().ok_or(Error::NoEquilibrium {
                iterations: 0,
                residual: f64::INFINITY,
            })?;
            classify_recovery(&traj, &x_sep, &sc.recovery)
        }
        Err(Error::IntegrationDiverged { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}
