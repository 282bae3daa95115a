//! Black-box tests of the `bddc` binary: exit codes, artifact layout and
//! subcommand behavior on a small problem.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bddc")
}

const TINY_CONFIG: &str = "[grid]\nn = 8\nper_side = 2\n\n[field]\nr_terms = 2\n\
                           expected = \"constant:0\"\n\n[samples]\nm_train = 6\nm_test = 3\n\n\
                           [train]\nmax_epochs = 100\n\n[output]\ndir = \"out\"\n";

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn bddc")
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, TINY_CONFIG).expect("write config");
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_and_subcommand_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["--definitely-not-a-flag", "selftest"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("Usage") || stderr.contains("usage"),
        "usage text missing: {stderr}"
    );

    let out = run_in(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run_in(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
}

#[test]
fn invalid_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        "this is not toml [",
        "[grid]\nunknown_key = 1\n",
        "[grid]\nn = 7\nper_side = 2\n",
        "[field]\nfamily = \"cauchy\"\n",
        "[field]\nexpected = \"wavy\"\n",
        "[pcg]\ntol = 0.0\n",
    ];
    for (i, text) in cases.iter().enumerate() {
        let path = dir.path().join(format!("bad{i}.toml"));
        std::fs::write(&path, text).unwrap();
        let out = run_in(dir.path(), &["--config", path.to_str().unwrap(), "selftest"]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "config case {i} should exit 2; stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    // Conflicting source selection is a usage error.
    let good = dir.path().join("good.toml");
    std::fs::write(&good, TINY_CONFIG).unwrap();
    let out = run_in(
        dir.path(),
        &["--config", good.to_str().unwrap(), "--preset", "desk", "solve"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = run_in(
        dir.path(),
        &["--config", &config, "train", "--data", "does-not-exist"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let out = run_in(
        dir.path(),
        &["--config", &config, "report", "--records", "missing.csv"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn solve_prints_convergent_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = run_in(
        dir.path(),
        &["--config", &config, "solve", "--rho", "constant:1"],
    );
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("solve output is JSON");
    assert_eq!(v["converged"], serde_json::Value::Bool(true));
    assert!(v["iterations"].as_u64().unwrap() >= 1);
    assert!(v["rel_err_vs_direct"].as_f64().unwrap() <= 1e-6);
    assert!(v["lambda_min"].as_f64().unwrap() >= 1.0 - 1e-8);

    let out = run_in(
        dir.path(),
        &["--config", &config, "solve", "--rho", "linear:1"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_flow_artifacts_and_oracle_closure() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());

    let out = run_in(dir.path(), &["--config", &config, "gen-data"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "gen-data failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "out/train/data.csv",
        "out/train/meta.json",
        "out/test/data.csv",
        "out/test/meta.json",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    // Header shape: R then O columns.
    let csv = std::fs::read_to_string(dir.path().join("out/train/data.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.starts_with("xi_1,xi_2,y_1,"));
    assert_eq!(csv.lines().count(), 1 + 6);

    let out = run_in(dir.path(), &["--config", &config, "train"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("out/model.json").is_file());
    assert!(dir.path().join("out/train_log.csv").is_file());
    let log = std::fs::read_to_string(dir.path().join("out/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,mse,grad_norm"));

    let out = run_in(dir.path(), &["--config", &config, "evaluate"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "evaluate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["samples"], serde_json::json!(3));
    assert!(summary["nrmse"].as_f64().is_some());
    for f in [
        "out/report/summary.json",
        "out/report/records.csv",
        "out/report/hist_iterations.csv",
        "out/report/hist_lambda_max_diff.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }

    // Oracle closure through the CLI: all comparison metrics exactly zero.
    let out = run_in(
        dir.path(),
        &[
            "--config",
            &config,
            "evaluate",
            "--oracle",
            "--out",
            "out/oracle",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let closure: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in [
        "nrmse",
        "smape_iterations",
        "smape_lambda_min",
        "smape_lambda_max",
        "linf_iterations",
        "linf_lambda_min",
        "linf_lambda_max",
    ] {
        assert_eq!(
            closure[key].as_f64(),
            Some(0.0),
            "oracle metric {key} is not exactly zero: {}",
            closure[key]
        );
    }

    // Rebuild the report from records alone: same comparison metrics,
    // nrmse absent (null).
    let out = run_in(
        dir.path(),
        &[
            "--config",
            &config,
            "report",
            "--records",
            "out/report/records.csv",
            "--out",
            "out/rebuilt",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let rebuilt: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rebuilt["nrmse"].is_null());
    assert_eq!(rebuilt["smape_lambda_max"], summary["smape_lambda_max"]);
    assert!(dir.path().join("out/rebuilt/summary.json").is_file());
}

#[test]
fn evaluating_against_mismatched_geometry_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = run_in(dir.path(), &["--config", &config, "gen-data"]);
    assert_eq!(out.status.code(), Some(0));
    let out = run_in(dir.path(), &["--config", &config, "train"]);
    assert_eq!(out.status.code(), Some(0));

    // Same files, different geometry: the layout hash must not match.
    let other = dir.path().join("other.toml");
    std::fs::write(
        &other,
        TINY_CONFIG.replace("n = 8", "n = 12").replace("per_side = 2", "per_side = 3"),
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &["--config", other.to_str().unwrap(), "evaluate"],
    );
    assert_eq!(
        out.status.code(),
        Some(2),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn custom_dataset_flags_write_single_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny_config(dir.path());
    let out = run_in(
        dir.path(),
        &[
            "--config", &config, "gen-data", "--samples", "4", "--seed", "123", "--out",
            "custom",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("custom/data.csv").is_file());
    assert!(!dir.path().join("custom/train").exists());
    let meta: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("custom/meta.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(meta["sample_seeds"], serde_json::json!([123, 124, 125, 126]));
}

#[test]
fn selftest_passes_and_presets_differ() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["selftest"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().count() >= 5);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));

    // Presets parse and produce different experiment scales (visible via
    // the config hash in solve output).
    let hash = |preset: &str| {
        let out = run_in(dir.path(), &["--preset", preset, "solve", "--rho", "constant:1"]);
        assert_eq!(out.status.code(), Some(0), "preset {preset} solve failed");
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    assert_ne!(hash("desk"), hash("paper"));

    let out = run_in(dir.path(), &["--preset", "galaxy", "selftest"]);
    assert_eq!(out.status.code(), Some(2));
}
