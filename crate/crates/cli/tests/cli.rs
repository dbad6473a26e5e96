use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
seed = 11
[simulate]
n = 300
[model]
phi_width = 8
psi_width = 8
n_durations = 8
max_epochs = 6
[sweep]
gamma_wd = [0.0, 0.01, 1.0]
replicates = 2
tuned = true
[theory]
n_pairs = 4
n_x = 6
n_pinsker = 10
cells = 400
[search]
budget = 2
"#;

fn survbal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_survbal")).current_dir(dir).args(args).output().expect("spawn")
}

fn setup(extra: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("run.toml"), format!("{SMALL}{extra}")).unwrap();
    dir
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = survbal(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, rel: &str) -> String {
    std::fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn simulate_prints_summary_and_repeats_byte_for_byte() {
    let dir = setup("");
    let p = dir.path();
    let stdout = ok(p, &["simulate", "--config", "run.toml", "--out", "a"]);
    let line = stdout.lines().find(|l| l.starts_with("censored_fraction")).unwrap();
    let frac: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!((frac - 0.30).abs() <= 0.03, "{frac}");
    assert!(stdout.contains("d_wd_init"));
    ok(p, &["simulate", "--config", "run.toml", "--out", "b"]);
    for f in ["data.csv", "truth.csv", "truth_scores.csv", "truth_meta.toml"] {
        assert_eq!(read(p, &format!("a/{f}")), read(p, &format!("b/{f}")), "{f}");
    }
    ok(p, &["simulate", "--config", "run.toml", "--out", "c", "--seed", "12"]);
    assert_ne!(read(p, "a/data.csv"), read(p, "c/data.csv"));
}

#[test]
fn invalid_rho_is_a_validation_error_naming_the_line() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "seed = 1\n[simulate]\nrho = 1.5\n").unwrap();
    let out = survbal(dir.path(), &["simulate", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("rho"), "{err}");
}

#[test]
fn unknown_flag_exits_with_validation_code() {
    let dir = TempDir::new().unwrap();
    assert_eq!(survbal(dir.path(), &["simulate", "--bogus"]).status.code(), Some(1));
}

#[test]
fn train_without_dataset_reports_missing_file() {
    let dir = setup("");
    let out = survbal(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn simulate_train_evaluate_is_deterministic() {
    let dir = setup("");
    let p = dir.path();
    for out in ["a", "b"] {
        for cmd in ["simulate", "train", "evaluate"] {
            ok(p, &[cmd, "--config", "run.toml", "--out", out]);
        }
    }
    for f in ["report.csv", "checkpoint.txt", "metrics.csv", "predictions.csv", "squares.csv"] {
        assert_eq!(read(p, &format!("a/{f}")), read(p, &format!("b/{f}")), "{f}");
    }
    let data = read(p, "a/data.csv");
    let n_test = data.lines().skip(1).filter(|l| l.ends_with(",test")).count();
    assert_eq!(read(p, "a/squares.csv").lines().count(), n_test + 1);
    let metrics = read(p, "a/metrics.csv");
    assert_eq!(metrics.lines().count(), 2);
    assert!(metrics.starts_with("run_id,seed,gamma_wd,p_wd,d_wd_init,MCATE,MPEHE,FSM"));
    let report = read(p, "a/report.csv");
    assert!(report.lines().count() >= 2);
}

#[test]
fn evaluate_rejects_checkpoint_on_another_time_scale() {
    let dir = setup("");
    let p = dir.path();
    ok(p, &["simulate", "--config", "run.toml"]);
    ok(p, &["train", "--config", "run.toml"]);
    // a truth window far shorter than the first model cut
    let meta = read(p, "out/truth_meta.toml");
    let meta: String = meta
        .lines()
        .map(|l| if l.starts_with("tau_min") { "tau_min = 0.0001".to_string() } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(p.join("out/truth_meta.toml"), meta).unwrap();
    let out = survbal(p, &["evaluate", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
}

#[test]
fn divergence_exits_two_and_keeps_a_checkpoint() {
    let dir = setup("");
    let p = dir.path();
    ok(p, &["simulate", "--config", "run.toml"]);
    let cfg = read(p, "run.toml").replace("max_epochs = 6", "max_epochs = 6\nlearning_rate = 1e300");
    std::fs::write(p.join("wild.toml"), cfg).unwrap();
    let out = survbal(p, &["train", "--config", "wild.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(p.join("out/checkpoint.txt").exists());
}

#[test]
fn theory_passes_and_swapped_sides_fail() {
    let dir = setup("");
    let p = dir.path();
    let stdout = ok(p, &["theory", "--config", "run.toml"]);
    assert!(stdout.contains("0 violations"));
    let rows = read(p, "out/theorem1.csv");
    assert_eq!(rows.lines().count(), 4 * 6 + 1);
    assert!(rows.lines().skip(1).all(|l| l.ends_with(",true")));

    let swapped = read(p, "run.toml").replace("[theory]", "[theory]\nswap_sides = true");
    std::fs::write(p.join("swap.toml"), swapped).unwrap();
    let out = survbal(p, &["theory", "--config", "swap.toml", "--out", "swapped"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn sweep_writes_one_row_per_replicate_and_grid_point() {
    let dir = setup("");
    let p = dir.path();
    ok(p, &["sweep", "--config", "run.toml"]);
    let runs = read(p, "out/sweep_runs.csv");
    let grid_rows = runs.lines().filter(|l| l.contains(",grid,")).count();
    let tuned_rows = runs.lines().filter(|l| l.contains(",tuned,")).count();
    assert_eq!((grid_rows, tuned_rows), (3 * 2, 2));
    let summary = read(p, "out/sweep_summary.csv");
    assert_eq!(summary.lines().count(), 1 + 3 + 1);
    ok(p, &["sweep", "--config", "run.toml", "--out", "again"]);
    assert_eq!(runs, read(p, "again/sweep_runs.csv"));
    assert_eq!(summary, read(p, "again/sweep_summary.csv"));
}

#[test]
fn search_writes_leaderboard_and_loadable_best_config() {
    let dir = setup("");
    let p = dir.path();
    ok(p, &["simulate", "--config", "run.toml"]);
    ok(p, &["search", "--config", "run.toml"]);
    assert_eq!(read(p, "out/leaderboard.csv").lines().count(), 3);
    let best = survbal::config::RunConfig::from_toml(&read(p, "out/best.toml")).unwrap();
    assert_eq!(best.seed, 11);
    ok(p, &["train", "--config", "out/best.toml", "--out", "out"]);
}
