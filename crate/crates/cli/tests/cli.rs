use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rough_filter::config::ExperimentConfig;
use rough_filter::value::Mode;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rough-filter"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Short ex61 run on a coarse grid.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::ex61();
    cfg.horizon = 1.0;
    cfg.dt = 0.01;
    cfg.schedule.breakpoints = vec![0.0, 0.5];
    cfg.grid.q_nodes = 21;
    cfg.grid.gamma_nodes = 21;
    cfg.grid.controls = 5;
    cfg.output.record_every = 1;
    let path = dir.join("small.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn rows(file: &Path) -> usize {
    fs::read_to_string(file).unwrap().lines().count() - 1
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&run(&["--help"])), 0);
    let v = run(&["--version"]);
    assert_eq!(code(&v), 0);
    assert!(String::from_utf8_lossy(&v.stdout).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.toml");
    assert_eq!(code(&run(&["simulate", "--config", missing.to_str().unwrap()])), 2);

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "experiment = \"ex61\"\nhorizon = -1\n").unwrap();
    assert_eq!(code(&run(&["simulate", "--config", bad.to_str().unwrap()])), 2);

    assert_eq!(code(&run(&["verify", "nonsense"])), 2);
    assert_eq!(code(&run(&["simulate", "--replicates", "0"])), 2);
    assert_eq!(code(&run(&["fixture", "--p", "3.5", "--out", tmp.path().to_str().unwrap()])), 2);
}

#[test]
fn missing_input_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = run(&[
        "filter",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        tmp.path().join("nothing").to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["chain.csv", "observation.csv", "rough.csv", "truth.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
        assert_eq!(rows(&a.join(f)), 101, "{f}");
    }
    let m = manifest(&a);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seeds"][0], 1);
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);

    let c = tmp.path().join("c");
    run(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "2", "--out", c.to_str().unwrap()]);
    assert_ne!(fs::read(a.join("observation.csv")).unwrap(), fs::read(c.join("observation.csv")).unwrap());
}

#[test]
fn filter_reads_stored_observations() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    let direct = tmp.path().join("direct");
    let stored = tmp.path().join("stored");
    assert_eq!(code(&run(&["filter", "--config", cfg.to_str().unwrap(), "--out", direct.to_str().unwrap()])), 0);
    let out = run(&[
        "filter",
        "--config",
        cfg.to_str().unwrap(),
        "--input",
        sim.to_str().unwrap(),
        "--out",
        stored.to_str().unwrap(),
        "--emit-gnuplot",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(direct.join("filter.csv")).unwrap(),
        fs::read(stored.join("filter.csv")).unwrap()
    );
    assert_eq!(rows(&stored.join("filter.csv")), 101);
    assert!(stored.join("plot.gp").exists());
    let rate = manifest(&stored)["summary"]["posterior_hit_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn robust_filter_in_both_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    for mode in ["lq", "grid"] {
        let dir = tmp.path().join(mode);
        let out = run(&[
            "robust-filter",
            "--config",
            cfg.to_str().unwrap(),
            "--mode",
            mode,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{mode}: {}", String::from_utf8_lossy(&out.stderr));
        assert_eq!(rows(&dir.join("estimates.csv")), 101);
        assert_eq!(rows(&dir.join("kappa_track.csv")), 101);
        let header = fs::read_to_string(dir.join("estimates.csv")).unwrap();
        assert!(header.lines().next().unwrap().contains("lambda"));
        let m = manifest(&dir);
        assert_eq!(m["command"], "robust-filter");
        let estimate = m["summary"]["estimate"].as_f64().unwrap();
        assert!(estimate > 0.0 && estimate.is_finite());
        assert_eq!(m["summary"]["truth"].as_f64().unwrap(), 0.7);
        assert_eq!(dir.join("grid_final.csv").exists(), mode == "grid");
    }
}

#[test]
fn replicates_get_their_own_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let base = tmp.path().join("reps");
    let out = run(&[
        "robust-filter",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--replicates",
        "3",
        "--out",
        base.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for seed in 7..10 {
        let dir = base.join(format!("rep-{seed}"));
        assert_eq!(manifest(&dir)["seeds"][0], seed);
    }
    let top = manifest(&base);
    assert_eq!(top["seeds"], serde_json::json!([7, 8, 9]));
    assert_eq!(top["summary"].as_array().unwrap().len(), 3);
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
}

#[test]
fn verify_exit_code_follows_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["verify", "chen", "--out", tmp.path().to_str().unwrap()]);
    let csv = fs::read_to_string(tmp.path().join("verify_report.csv")).unwrap();
    let failed = csv.lines().skip(1).filter(|l| l.ends_with(",false")).count();
    assert!(csv.lines().count() > 1);
    assert_eq!(code(&out), if failed == 0 { 0 } else { 4 });
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS") || l.starts_with("FAIL") || l.contains("checks")));
}

#[test]
fn fixture_quadrature_matches_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["fixture", "--n", "8", "--p", "2.2", "--eps", "0.3", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let expected = 2f64.powf(-3.0 / 2.2) * 8f64.powf(1.0 - 1.0 / 2.2 - 0.3);
    assert!((summary["expected_integral"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert!((summary["quadrature"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert_eq!(rows(&tmp.path().join("fixture_drive.csv")), 33);
}

#[test]
fn config_command_round_trips() {
    let out = run(&["config", "--experiment", "ex62", "--seed", "5", "--mode", "grid"]);
    assert_eq!(code(&out), 0);
    let cfg = ExperimentConfig::from_toml(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let mut expected = ExperimentConfig::ex62();
    expected.seed = 5;
    expected.mode = Mode::Grid;
    assert_eq!(cfg, expected);
}

#[test]
fn shipped_configs_match_presets() {
    for (file, preset) in [("configs/ex61.toml", ExperimentConfig::ex61()), ("configs/ex62.toml", ExperimentConfig::ex62())] {
        let text = fs::read_to_string(workspace_file(file)).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), preset, "{file}");
    }
}
