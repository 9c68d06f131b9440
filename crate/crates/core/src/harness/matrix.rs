//! The scenario matrix: expansion, parallel execution and output files.

use std::path::Path;

use rayon::prelude::*;

use super::config::HarnessConfig;
use super::metrics::{probe_audit, score, halving_bound, Summary};
use super::scenario::{build_scenario, run_scenario, Prepared, RunOutput, ScenarioKey};
use super::HarnessError;
use crate::scheduler::SchedulerKind;

pub struct MatrixOutput {
    /// One run per scenario, ordered by scenario name.
    pub runs: Vec<RunOutput>,
    pub summary: Summary,
}

impl MatrixOutput {
    pub fn failed(&self) -> bool {
        !self.summary.invariant_failures.is_empty()
    }
}

/// Scenario keys grouped so that each group shares a seed and differs only in scheduler.
pub fn matrix_groups(cfg: &HarnessConfig) -> Result<Vec<Vec<ScenarioKey>>, HarnessError> {
    let attacks = cfg.attacks()?;
    let mut groups = Vec::new();
    for attack in &attacks {
        for &processes in &cfg.process_counts {
            for &seed in &cfg.seeds {
                let mut g: Vec<ScenarioKey> = cfg
                    .schedulers
                    .iter()
                    .map(|&scheduler| ScenarioKey {
                        regime: cfg.regime,
                        stress: cfg.stress,
                        scheduler,
                        attack: *attack,
                        processes,
                        seed,
                    })
                    .collect();
                // Baseline first: its victim end time feeds detection efficiency.
                g.sort_by_key(|k| k.scheduler != SchedulerKind::Baseline);
                g.dedup();
                groups.push(g);
            }
        }
    }
    Ok(groups)
}

fn run_group(cfg: &HarnessConfig, prep: &Prepared, group: &[ScenarioKey]) -> Result<Vec<RunOutput>, HarnessError> {
    let mut out: Vec<RunOutput> = Vec::new();
    for key in group {
        let sc = build_scenario(cfg, prep, key)?;
        let baseline_end = out
            .iter()
            .find(|r| r.report.scheduler == SchedulerKind::Baseline)
            .map(|r| r.report.victim_end);
        let mut run = run_scenario(prep, &sc, baseline_end.flatten(), false)?;
        // The probe bound is checked against the log, not the scheduler's own counters.
        for a in probe_audit(&run.schedule) {
            let limit = cfg.mitigation.linear_limit;
            if a.halving > halving_bound(a.suspects, limit) || a.linear > limit {
                run.report.protocol_errors += 1;
            }
        }
        out.push(run);
    }
    Ok(out)
}

/// Runs every scenario of the configuration and scores the result.
pub fn run_matrix(cfg: &HarnessConfig, prep: &Prepared) -> Result<MatrixOutput, HarnessError> {
    let groups = matrix_groups(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let results: Vec<Result<Vec<RunOutput>, HarnessError>> =
        pool.install(|| groups.par_iter().map(|g| run_group(cfg, prep, g)).collect());
    let mut runs = Vec::new();
    for r in results {
        runs.extend(r?);
    }
    runs.sort_by(|a, b| a.report.name.cmp(&b.report.name));
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = score(&reports);
    Ok(MatrixOutput { runs, summary })
}

/// Writes `<scenario>.csv`, `<scenario>.schedule.csv` and `summary.csv` into `dir`.
pub fn write_outputs(out: &MatrixOutput, dir: &Path) -> Result<(), HarnessError> {
    let io = |p: &Path, e: std::io::Error| HarnessError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for run in &out.runs {
        let path = dir.join(format!("{}.csv", run.report.name));
        let f = std::fs::File::create(&path).map_err(|e| io(&path, e))?;
        run.report.write(std::io::BufWriter::new(f))?;
        let path = dir.join(format!("{}.schedule.csv", run.report.name));
        let f = std::fs::File::create(&path).map_err(|e| io(&path, e))?;
        write_schedule(&run.schedule, std::io::BufWriter::new(f))?;
    }
    let path = dir.join("summary.csv");
    let f = std::fs::File::create(&path).map_err(|e| io(&path, e))?;
    out.summary.write(std::io::BufWriter::new(f))
}

pub fn write_schedule<W: std::io::Write>(log: &[crate::scheduler::ScheduleEvent], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| HarnessError::Report(e.to_string());
    w.write_record(["tick", "pid", "action", "socket", "reason"]).map_err(err)?;
    for e in log {
        w.write_record([
            e.tick.to_string(),
            e.pid.to_string(),
            e.action.to_string(),
            e.socket.map(|s| s.to_string()).unwrap_or_default(),
            e.reason.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::Report(e.to_string()))
}

/// Loads every scenario report in `dir` (files ending in `.csv` other than schedules and the summary).
pub fn read_reports(dir: &Path) -> Result<Vec<super::report::ScenarioReport>, HarnessError> {
    let io = |p: &Path, e: std::io::Error| HarnessError::Io(format!("{}: {e}", p.display()));
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".csv") && !name.ends_with(".schedule.csv") && name != "summary.csv" && !name.starts_with("trace")
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let f = std::fs::File::open(p).map_err(|e| io(p, e))?;
            super::report::ScenarioReport::read(std::io::BufReader::new(f))
                .map_err(|e| HarnessError::Report(format!("{}: {e}", p.display())))
        })
        .collect()
}
