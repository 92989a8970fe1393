//! End-to-end checks of the `psee` binary: artifact layout, bit-exact
//! reruns, manifest round trips and the documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn psee(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psee"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL_RUN: &str = r#"{ "scenario": "lq_basic",
  "grid": { "t_final": 1.0, "delay": 0.25, "n_steps": 8 },
  "mc": { "n_paths": 8, "seed": 5 } }"#;

const ARTIFACTS: [&str; 5] = [
    "trace.csv",
    "control.csv",
    "gradcheck.csv",
    "identities.csv",
    "manifest.json",
];

#[test]
fn run_writes_artifacts_and_reruns_bit_identically() {
    let tmp = tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "cfg.json", SMALL_RUN);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");

    let run = psee(&["run", &cfg, "--out", out_a.to_str().unwrap()]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("run lq_basic"), "{stdout}");
    assert!(stdout.contains("J ="), "{stdout}");
    for name in ARTIFACTS {
        assert!(out_a.join(name).is_file(), "missing {name}");
    }

    let rerun = psee(&["run", &cfg, "--out", out_b.to_str().unwrap()]);
    assert!(rerun.status.success());
    for name in ARTIFACTS {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn manifest_embeds_a_config_that_reruns_bit_identically() {
    let tmp = tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "cfg.json", SMALL_RUN);
    let out_a = tmp.path().join("a");
    assert!(psee(&["run", &cfg, "--out", out_a.to_str().unwrap()]).status.success());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["scenario"], "lq_basic");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["n_paths"], 8);
    assert!(manifest["converged"].is_boolean());
    assert_eq!(
        manifest["config_sha256"].as_str().map(str::len),
        Some(64),
        "content hash should be a sha256 hex digest"
    );

    let cfg2 = write_cfg(tmp.path(), "cfg2.json", &manifest["config"].to_string());
    let out_b = tmp.path().join("b");
    assert!(psee(&["run", &cfg2, "--out", out_b.to_str().unwrap()]).status.success());
    for name in ARTIFACTS {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs after the manifest round trip");
    }
}

#[test]
fn plots_flag_writes_long_format_csvs() {
    let tmp = tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "cfg.json", SMALL_RUN);
    let out = tmp.path().join("a");
    let run = psee(&["run", &cfg, "--out", out.to_str().unwrap(), "--plots"]);
    assert!(run.status.success());
    for name in ["plot_trace.csv", "plot_control.csv", "plot_gradcheck.csv"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let control = std::fs::read_to_string(out.join("plot_control.csv")).unwrap();
    assert!(control.starts_with("quantity,t,value\n"), "{control}");
}

#[test]
fn rejected_inputs_exit_one_with_the_offending_path() {
    let tmp = tempdir().unwrap();

    // Unknown key, named with its JSON path.
    let bad_key = write_cfg(
        tmp.path(),
        "bad_key.json",
        r#"{ "scenario": "lq_basic", "grid": { "dt": 0.1 } }"#,
    );
    let out = psee(&["run", &bad_key]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dt"), "{err}");

    // Structurally valid config describing an impossible grid.
    let bad_grid = write_cfg(
        tmp.path(),
        "bad_grid.json",
        r#"{ "scenario": "lq_basic",
             "grid": { "t_final": 1.0, "delay": 0.3, "n_steps": 64 } }"#,
    );
    let out = psee(&["run", &bad_grid]);
    assert_eq!(out.status.code(), Some(1));

    // Missing file.
    let out = psee(&["run", tmp.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
}

#[test]
fn numerical_breakdown_exits_two() {
    let tmp = tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "blow.json",
        r#"{ "scenario": "lq_basic",
             "grid": { "t_final": 1.0, "delay": 0.25, "n_steps": 8 },
             "mc": { "n_paths": 4, "seed": 1 },
             "coefficients": { "noise_scale": 1e160 } }"#,
    );
    let out = psee(&["run", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite"), "{err}");
}

#[test]
fn derivative_and_oracle_verbs_succeed_on_a_small_scenario() {
    let tmp = tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "cfg.json", SMALL_RUN);

    let grad = psee(&["grad-check", &cfg]);
    assert!(grad.status.success(), "{}", String::from_utf8_lossy(&grad.stderr));
    let stdout = String::from_utf8_lossy(&grad.stdout);
    assert!(stdout.contains("variational"), "{stdout}");

    let oracle = psee(&["lq-oracle", &cfg]);
    assert!(oracle.status.success(), "{}", String::from_utf8_lossy(&oracle.stderr));
    let stdout = String::from_utf8_lossy(&oracle.stdout);
    assert!(stdout.contains("formula vs descent"), "{stdout}");
}

#[test]
fn identity_suite_verb_reports_all_sections() {
    let out = psee(&["check-identities", "--seed", "3", "--instances", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for section in ["duality", "change_of_variables", "adjoint_formula", "energy"] {
        assert!(stdout.contains(section), "missing `{section}` in:\n{stdout}");
    }
}
