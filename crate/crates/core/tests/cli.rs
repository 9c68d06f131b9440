use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use cachebeacon::beacon::{read_trace, validate_events};
use cachebeacon::harness::matrix::read_reports;
use cachebeacon::harness::metrics::score;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cachebeacon")).args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

const SMALL: &str = "techniques = [\"flush_reload\", \"prime_probe\"]\nprocess_counts = [3, 6, 12]\nseeds = [1, 2]\n";

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn run_writes_one_report_per_scenario_plus_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = files(&out).into_keys().collect();
    let reports = names.iter().filter(|n| !n.ends_with(".schedule.csv") && *n != "summary.csv").count();
    assert_eq!(reports, 24);
    assert!(names.contains(&"summary.csv".to_string()));
    assert_eq!(names.len(), 24 * 2 + 1);
}

#[test]
fn identical_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "regime = \"degraded\"\nprocess_counts = [6, 18]\nseeds = [4]\n");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&bin(&["run", "--config", &cfg, "--out", a.to_str().unwrap()])), 0);
    assert_eq!(code(&bin(&["run", "--config", &cfg, "--out", b.to_str().unwrap()])), 0);
    assert_eq!(files(&a), files(&b));
}

#[test]
fn score_recomputes_the_summary_from_report_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "techniques = [\"flush_flush\", \"none\"]\nprocess_counts = [6]\nseeds = [1, 2, 3]\n");
    let out = tmp.path().join("out");
    assert_eq!(code(&bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let rescored = tmp.path().join("rescored.csv");
    let o = bin(&["score", "--reports", out.to_str().unwrap(), "--out", rescored.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let original = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(std::fs::read_to_string(&rescored).unwrap(), original);
    assert_eq!(score(&read_reports(&out).unwrap()).to_csv(), original);
    assert!(original.contains("fp_rate,no_attack,0.000000"), "{original}");
}

#[test]
fn seed_and_scheduler_flags_narrow_the_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let o = bin(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "9", "--scheduler", "baseline"]);
    assert_eq!(code(&o), 0);
    let reports = read_reports(&out).unwrap();
    assert_eq!(reports.len(), 6);
    assert!(reports.iter().all(|r| r.seed == 9 && r.detection_efficiency == Some(0.0)));
}

#[test]
fn config_errors_exit_3_with_line_context() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "seeds = [1]\nworkerz = 2\n");
    let o = bin(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("workerz"), "{err}");

    let cfg = write_config(tmp.path(), "process_counts = [40]\n");
    assert_eq!(code(&bin(&["run", "--config", &cfg, "--out", "unused"])), 3);
    assert_eq!(code(&bin(&["run", "--out", "x", "--scheduler", "fifo"])), 3);
    assert_eq!(code(&bin(&["trace", "--out", "x", "--technique", "rowhammer"])), 3);
}

#[test]
fn invariant_failures_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    // Far too few ticks for any victim to finish.
    let cfg = write_config(tmp.path(), "techniques = [\"none\"]\nprocess_counts = [3]\nseeds = [1]\nmax_ticks = 20\n");
    let o = bin(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("invariant"));
}

#[test]
fn trained_models_can_drive_a_run_and_a_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let models = tmp.path().join("models");
    let o = bin(&["train", "--out", models.to_str().unwrap(), "--holdout-runs", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(models.join("rsa_sign.models.toml").exists());
    assert!(models.join("holdout.csv").exists());

    let cfg = write_config(tmp.path(), "techniques = [\"flush_reload\"]\nprocess_counts = [6]\nseeds = [2]\n");
    let fresh = tmp.path().join("fresh");
    let loaded = tmp.path().join("loaded");
    assert_eq!(code(&bin(&["run", "--config", &cfg, "--out", fresh.to_str().unwrap()])), 0);
    let o = bin(&["run", "--config", &cfg, "--out", loaded.to_str().unwrap(), "--models", models.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    // Same training seed, so loading the files reproduces the in-process models.
    assert_eq!(files(&fresh), files(&loaded));

    let tr = tmp.path().join("trace");
    let o = bin(&[
        "trace", "--out", tr.to_str().unwrap(), "--models", models.to_str().unwrap(), "--technique", "prime_probe", "--processes", "12", "--seed", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let name = "accurate-biscuit-prime_probe-n12-s0003";
    let beacons = std::fs::File::open(tr.join(format!("trace-{name}.beacons.csv"))).unwrap();
    let events = read_trace(beacons).unwrap();
    assert!(!events.is_empty());
    validate_events(&events).unwrap();
    let counters = std::fs::read_to_string(tr.join(format!("trace-{name}.counters.csv"))).unwrap();
    assert!(counters.starts_with("tick,pid,misses_base,misses_contention,misses_attack,instructions"));
    assert!(tr.join(format!("{name}.schedule.csv")).exists());
}

#[test]
fn missing_models_are_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin(&["run", "--out", tmp.path().join("o").to_str().unwrap(), "--models", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}
