//! Command-line front end: train models, run scenario matrices, score reports, dump traces.
//!
//! Exit status: 0 on success, 2 when a run violates an invariant, 3 on a bad
//! config or arguments, 1 for anything else (I/O and the like).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cachebeacon::beacon::write_trace;
use cachebeacon::harness::catalog::catalog;
use cachebeacon::harness::config::HarnessConfig;
use cachebeacon::harness::matrix::{read_reports, run_matrix, write_outputs, write_schedule};
use cachebeacon::harness::metrics::{score, Summary};
use cachebeacon::harness::scenario::{build_scenario, prepare, prepare_with, run_scenario, Prepared, ScenarioKey};
use cachebeacon::harness::train::{holdout, load_models, save_models, train_catalog, Holdout, TrainError};
use cachebeacon::harness::HarnessError;
use cachebeacon::machine::{write_counter_rows, Technique};
use cachebeacon::scheduler::SchedulerKind;

#[derive(Parser)]
#[command(name = "cachebeacon", version, about = "Footprint-aware scheduling and cache-attack detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train miss models for the configured program suite.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `training_seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Held-out parameter draws per program for the accuracy summary.
        #[arg(long, default_value_t = 5)]
        holdout_runs: usize,
    },
    /// Run the scenario matrix and write one report per scenario plus a summary.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run only this scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this scheduler (`biscuit` or `baseline`).
        #[arg(long, value_parser = parse_scheduler)]
        scheduler: Option<SchedulerKind>,
        /// Load models written by `train` instead of training afresh.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Recompute the summary from a directory of scenario reports.
    Score {
        #[arg(long)]
        reports: PathBuf,
        /// Summary file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a single scenario and dump its beacon, counter and schedule traces.
    Trace {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "biscuit", value_parser = parse_scheduler)]
        scheduler: SchedulerKind,
        /// Attack technique, or `none`.
        #[arg(long, default_value = "flush_reload")]
        technique: String,
        #[arg(long, default_value_t = 6)]
        processes: usize,
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

fn parse_scheduler(s: &str) -> Result<SchedulerKind, String> {
    SchedulerKind::parse(s).ok_or_else(|| format!("unknown scheduler `{s}`"))
}

enum Failure {
    Config(String),
    Invariant(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Invariant(_) => 2,
            Failure::Config(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Invariant(m) | Failure::Other(m) => m,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_)
            | HarnessError::ConfigFile(_)
            | HarnessError::Train(TrainError::EmptyGrid { .. } | TrainError::Degenerate { .. }) => {
                Failure::Config(e.to_string())
            }
            other => Failure::Other(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<HarnessConfig, Failure> {
    match path {
        Some(p) => HarnessConfig::load(p).map_err(|e| Failure::Config(e.to_string())),
        None => Ok(HarnessConfig::default()),
    }
}

fn prepared(cfg: &HarnessConfig, models: Option<&Path>) -> Result<Prepared, Failure> {
    match models {
        None => Ok(prepare(cfg)?),
        Some(dir) => {
            let cat = catalog(cfg.regime);
            let trained = load_models(&cat, dir).map_err(|e| Failure::Config(e.to_string()))?;
            Ok(prepare_with(cfg, cat, trained)?)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn print_summary(s: &Summary) {
    let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!("scenarios        {}", s.scenarios);
    println!("f_score          {}", show(s.overall.f_score()));
    println!("fp_rate          {} (fp={} tn={})", show(s.fp_rate()), s.no_attack.fp, s.no_attack.tn);
    for t in [Technique::FlushReload, Technique::FlushFlush, Technique::PrimeProbe] {
        if let Some(d) = s.mean_d(SchedulerKind::Biscuit, t) {
            println!("mean_d {:<10} {d:.4}", t.name());
        }
    }
    println!("overhead         no_attack {} attacked {}", show(s.overhead_no_attack.value()), show(s.overhead_attacked.value()));
    println!("model_accuracy   {}", show(s.model_accuracy.value()));
    println!("exoneration      {}/{}", s.exonerated, s.false_flags);
    println!("invariant fails  {}", s.invariant_failures.len());
}

fn check(s: &Summary) -> Result<(), Failure> {
    if s.invariant_failures.is_empty() {
        Ok(())
    } else {
        for f in &s.invariant_failures {
            eprintln!("invariant: {f}");
        }
        Err(Failure::Invariant(format!("{} invariant failure(s)", s.invariant_failures.len())))
    }
}

fn train(config: Option<&Path>, out: &Path, seed: Option<u64>, holdout_runs: usize) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.training_seed = s;
    }
    let cat = catalog(cfg.regime);
    let trained = train_catalog(&cat, cfg.training_seed).map_err(HarnessError::from)?;
    let written = save_models(&trained, out).map_err(|e| io_err(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training_seed ^ 0x401d);
    let path = out.join("holdout.csv");
    let mut w = csv::Writer::from_writer(create(&path)?);
    let err = |e: csv::Error| io_err(&path, e);
    w.write_record(["program", "regions", "samples", "accuracy", "coverage"]).map_err(err)?;
    println!("k = {:.6}", trained.k);
    for spec in &cat.programs {
        let h = holdout(spec, &trained.sets[spec.name()], holdout_runs, &mut rng).map_err(HarnessError::from)?;
        let n = h.len().max(1) as f64;
        let acc = h.iter().map(Holdout::accuracy).sum::<f64>() / n;
        let cov = h.iter().filter(|x| x.observed <= x.upper).count() as f64 / n;
        println!("{:<20} accuracy {acc:.4} coverage {cov:.4}", spec.name());
        w.write_record([
            spec.name().to_string(),
            spec.instrumented.sites.len().to_string(),
            h.len().to_string(),
            format!("{acc:.6}"),
            format!("{cov:.6}"),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    println!("wrote {} model files to {}", written.len(), out.display());
    Ok(())
}

fn run(config: Option<&Path>, out: &Path, seed: Option<u64>, scheduler: Option<SchedulerKind>, models: Option<&Path>) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = scheduler {
        cfg.schedulers = vec![s];
    }
    let prep = prepared(&cfg, models)?;
    let result = run_matrix(&cfg, &prep)?;
    write_outputs(&result, out)?;
    print_summary(&result.summary);
    check(&result.summary)
}

fn score_dir(reports: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let all = read_reports(reports)?;
    if all.is_empty() {
        return Err(Failure::Other(format!("{}: no scenario reports", reports.display())));
    }
    let summary = score(&all);
    match out {
        Some(p) => summary.write(create(p)?)?,
        None => {
            let stdout = std::io::stdout();
            summary.write(stdout.lock())?;
        }
    }
    check(&summary)
}

#[allow(clippy::too_many_arguments)]
fn trace(
    config: Option<&Path>,
    out: &Path,
    seed: u64,
    scheduler: SchedulerKind,
    technique: &str,
    processes: usize,
    models: Option<&Path>,
) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let attack = match technique {
        "none" => None,
        t => Some(Technique::parse(t).ok_or_else(|| Failure::Config(format!("unknown technique `{t}`")))?),
    };
    let cores = cfg.machine.sockets * cfg.machine.cores_per_socket;
    if processes < 2 || processes > cores {
        return Err(Failure::Config(format!("process count {processes} must be between 2 and {cores}")));
    }
    let prep = prepared(&cfg, models)?;
    let key = ScenarioKey {
        regime: cfg.regime,
        stress: cfg.stress,
        scheduler,
        attack,
        processes,
        seed,
    };
    let sc = build_scenario(&cfg, &prep, &key)?;
    let run = run_scenario(&prep, &sc, None, true)?;
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let name = key.name();

    let path = out.join(format!("{name}.csv"));
    run.report.write(create(&path)?)?;
    let path = out.join(format!("{name}.schedule.csv"));
    write_schedule(&run.schedule, create(&path)?)?;
    let path = out.join(format!("trace-{name}.beacons.csv"));
    write_trace(create(&path)?, &run.beacons).map_err(|e| io_err(&path, e))?;
    let path = out.join(format!("trace-{name}.counters.csv"));
    let mut w = create(&path)?;
    write_counter_rows(&run.counters, &mut w).map_err(|e| io_err(&path, e))?;
    w.flush().map_err(|e| io_err(&path, e))?;

    let r = &run.report;
    println!("{name}: victim ticks {:?}, alarms {}, flagged {:?}", r.victim_ticks(), r.alarms, r.flagged);
    let failures = r.invariant_failures();
    if failures.is_empty() {
        Ok(())
    } else {
        for f in &failures {
            eprintln!("invariant: {f}");
        }
        Err(Failure::Invariant(format!("{name}: {} invariant failure(s)", failures.len())))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train { config, out, seed, holdout_runs } => train(config.as_deref(), out, *seed, *holdout_runs),
        Command::Run { config, out, seed, scheduler, models } => run(config.as_deref(), out, *seed, *scheduler, models.as_deref()),
        Command::Score { reports, out } => score_dir(reports, out.as_deref()),
        Command::Trace { config, out, seed, scheduler, technique, processes, models } => {
            trace(config.as_deref(), out, *seed, *scheduler, technique, *processes, models.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
