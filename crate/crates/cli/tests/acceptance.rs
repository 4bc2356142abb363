//! Front-end acceptance: byte-identical artifacts across repeated runs, the
//! exit-code contract, and the documented failure modes.

use std::fs;
use std::path::{Path, PathBuf};

use recobound_cli::{exit_code_for, run, Command};

fn write_config(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, contents).unwrap();
    path
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("recobound-accept-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn artifact_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

const SMIB_SWEEP_CONFIG: &str = r#"{
    "model": {"name": "smib"},
    "parameters": {"select": ["t_clear"]},
    "integration": {"rel_tol": 1e-8},
    "sweep": {"parameter": "t_clear", "min": 0.1, "max": 0.4, "points": 7}
}"#;

const SMIB_MARGIN_CONFIG: &str = r#"{
    "model": {"name": "smib"},
    "parameters": {"select": ["t_clear"]},
    "solver": {"max_iterations": 60}
}"#;

/// Determinism: repeated runs of any command with identical config produce
/// byte-identical artifacts.
#[test]
fn repeated_runs_produce_byte_identical_artifacts() {
    let base = tmpdir("determinism");
    let cfg = write_config(&base, "scenario.json", SMIB_SWEEP_CONFIG);
    let margin_cfg = write_config(&base, "margin.json", SMIB_MARGIN_CONFIG);

    // The trace needs a boundary starting point; take it from a prior
    // boundary1d run so the scenario remains self-contained.
    let out_b1 = base.join("start");
    run(Command::Boundary1d, &margin_cfg, Some(&out_b1)).unwrap();
    let b1: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out_b1.join("boundary1d.json")).unwrap(),
    )
    .unwrap();
    let t_star = b1["p_star"].as_f64().unwrap();
    let trace_cfg = write_config(
        &base,
        "trace.json",
        &format!(
            r#"{{
                "model": {{"name": "smib"}},
                "parameters": {{"select": ["p_m", "t_clear"]}},
                "solver": {{"epsilon": 1e-5, "kappa": 0.02, "n_points": 4,
                            "start": [0.6, {t_star}]}}
            }}"#
        ),
    );

    let cases: Vec<(&str, Command, &PathBuf)> = vec![
        ("validate", Command::Validate, &cfg),
        ("simulate", Command::Simulate, &cfg),
        ("gsweep", Command::Gsweep, &cfg),
        ("boundary1d", Command::Boundary1d, &cfg),
        ("margin", Command::Margin, &margin_cfg),
        ("trace2d", Command::Trace2d, &trace_cfg),
    ];
    let started = std::time::Instant::now();
    for (name, command, config) in cases {
        let out_a = base.join(format!("{name}-a"));
        let out_b = base.join(format!("{name}-b"));
        run(command, config, Some(&out_a)).unwrap_or_else(|e| panic!("{name} run a: {e}"));
        run(command, config, Some(&out_b)).unwrap_or_else(|e| panic!("{name} run b: {e}"));
        let a = artifact_bytes(&out_a);
        let b = artifact_bytes(&out_b);
        assert_eq!(a.len(), b.len(), "{name}: artifact sets differ");
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            assert_eq!(na, nb, "{name}: artifact names differ");
            assert_eq!(ba, bb, "{name}: artifact {na} is not byte-identical");
        }
        println!("criterion 8 [{name}]: PASS (byte-identical artifacts)");
    }
    println!(
        "criterion 8: PASS (determinism across repeated runs, {:?})",
        started.elapsed()
    );
}

/// Exit-code contract: configuration errors map to 2, numerical/solver
/// failures to 3.
#[test]
fn exit_codes_follow_the_contract() {
    let base = tmpdir("exitcodes");

    // Invalid config: zero-length horizon.
    let bad = write_config(
        &base,
        "bad.json",
        r#"{
            "model": {"name": "smib"},
            "parameters": {"select": ["t_clear"]},
            "integration": {"horizon": 0.0}
        }"#,
    );
    let err = run(Command::Simulate, &bad, Some(&base.join("bad-out"))).unwrap_err();
    assert_eq!(exit_code_for(&err), 2, "zero horizon must be a config error");

    // Unknown model.
    let unknown = write_config(
        &base,
        "unknown.json",
        r#"{"model": {"name": "nine_bus"}}"#,
    );
    let err = run(Command::Validate, &unknown, Some(&base.join("u-out"))).unwrap_err();
    assert_eq!(exit_code_for(&err), 2);

    // Solver precondition violation: boundary1d starting outside the
    // recovery region is a numerical failure (exit 3) with a diagnostic.
    let outside = write_config(
        &base,
        "outside.json",
        r#"{
            "model": {"name": "smib"},
            "parameters": {"select": ["t_clear"]},
            "solver": {"start": [0.6]}
        }"#,
    );
    let out = base.join("outside-out");
    let err = run(Command::Boundary1d, &outside, Some(&out)).unwrap_err();
    assert_eq!(exit_code_for(&err), 3);
    assert!(err.to_string().contains("not in the recovery region"));
    let diag = fs::read_to_string(out.join("error.json")).unwrap();
    assert!(diag.contains("recovery region"));
}

/// The artifacts embed the config hash and tool version.
#[test]
fn artifacts_carry_provenance() {
    let base = tmpdir("provenance");
    let cfg = write_config(&base, "scenario.json", SMIB_SWEEP_CONFIG);
    let out = base.join("out");
    run(Command::Gsweep, &cfg, Some(&out)).unwrap();
    let csv = fs::read_to_string(out.join("gsweep.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert!(first.starts_with("# config_hash="));
    assert!(first.contains("tool_version="));

    run(Command::Validate, &cfg, Some(&out)).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("validation.json")).unwrap()).unwrap();
    assert!(json["provenance"]["config_hash"].is_string());
    assert!(json["provenance"]["tool_version"].is_string());
}

/// gsweep straddling the boundary flips the recovered flag exactly once and
/// reports G decreasing toward the boundary from inside.
#[test]
fn gsweep_straddles_boundary_with_single_flip() {
    let base = tmpdir("gsweep");
    let cfg = write_config(&base, "scenario.json", SMIB_SWEEP_CONFIG);
    let out = base.join("out");
    run(Command::Gsweep, &cfg, Some(&out)).unwrap();
    let csv = fs::read_to_string(out.join("gsweep.csv")).unwrap();
    let rows: Vec<Vec<String>> = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect();
    assert_eq!(rows.len(), 7);
    let recovered: Vec<bool> = rows.iter().map(|r| r[3] == "true").collect();
    let flips = recovered.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(flips, 1, "recovered flags: {recovered:?}");
    // G decreases along the recovered prefix toward the boundary.
    let g: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    for w in g.windows(2).take(recovered.iter().filter(|r| **r).count() - 1) {
        assert!(w[1] < w[0], "G not decreasing: {g:?}");
    }
}
