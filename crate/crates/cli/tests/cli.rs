//! End-to-end checks of the `feelsim` binary: artifact layout, overrides,
//! exit codes, and byte-level reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn feelsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_feelsim"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_smoke_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("smoke.cfg");
    std::fs::write(
        &path,
        "\
num_devices = 10
sched_cardinality = 2
total_rounds = 50
seed = 7
synth_samples = 1000
synth_feature_dim = 8
synth_test_samples = 400
eval_every = 10
",
    )
    .unwrap();
    path
}

#[test]
fn run_smoke_produces_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(tmp.path());
    let out = feelsim(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--scheduler",
            "proposed,random",
            "--out",
            "results",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for cell in ["proposed_seed7", "random_seed7"] {
        let dir = tmp.path().join("results").join(cell);
        assert!(dir.join("manifest.json").is_file());
        assert!(dir.join("rounds.csv").is_file());
        assert!(dir.join("summary.csv").is_file());
    }
    assert!(tmp.path().join("results/cells_summary.csv").is_file());
}

#[test]
fn missing_config_names_path_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = feelsim(&["run", "--config", "/no/such/place.cfg"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/place.cfg"), "stderr: {err}");
}

#[test]
fn set_override_lands_in_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(tmp.path());
    let out = feelsim(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "sched_cardinality=3",
            "--set",
            "total_rounds=20",
            "--out",
            "o",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_slice(
        &std::fs::read(tmp.path().join("o/proposed_seed7/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["system"]["sched_cardinality"], 3);
    assert_eq!(manifest["config"]["system"]["total_rounds"], 20);
}

#[test]
fn validate_config_reports_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = feelsim(&["validate-config", "--set", "rate_margin=0"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rate_margin"));

    let ok = feelsim(&["validate-config", "--set", "rate_margin=0.9"], tmp.path());
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("ok"));
}

#[test]
fn unknown_flag_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = feelsim(&["run", "--bogus"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_merges_and_rejects_mismatches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(tmp.path());
    let out = feelsim(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--scheduler",
            "proposed,random",
            "--seeds",
            "1,2",
            "--out",
            "cmp",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = feelsim(&["compare", "cmp"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for table in ["accuracy_vs_round.csv", "loss_vs_round.csv", "energy_vs_round.csv"] {
        assert!(tmp.path().join("cmp").join(table).is_file());
    }

    // a run with a different device count poisons the directory
    let out = feelsim(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "num_devices=12",
            "--seeds",
            "3",
            "--out",
            "cmp",
        ],
        tmp.path(),
    );
    assert!(out.status.success());
    let out = feelsim(&["compare", "cmp"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_devices"));
}

#[test]
fn identical_seeds_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(tmp.path());
    for out_dir in ["a", "b"] {
        let out = feelsim(
            &[
                "run",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out_dir,
                "--jobs",
                "2",
            ],
            tmp.path(),
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["rounds.csv", "summary.csv", "manifest.json"] {
        let a = std::fs::read(tmp.path().join("a/proposed_seed7").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b/proposed_seed7").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn sweep_creates_nested_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_smoke_config(tmp.path());
    let out = feelsim(
        &[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "total_rounds=10",
            "--sweep",
            "sched_cardinality=1,2",
            "--out",
            "sweep",
        ],
        tmp.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp
        .path()
        .join("sweep/sched_cardinality-1/proposed_seed7/summary.csv")
        .is_file());
    assert!(tmp
        .path()
        .join("sweep/sched_cardinality-2/proposed_seed7/summary.csv")
        .is_file());
}
