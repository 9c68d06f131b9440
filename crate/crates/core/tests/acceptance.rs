//! Acceptance gate. Runs the full scenario matrices once and prints one
//! PASS/FAIL line per criterion; exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cachebeacon::harness::catalog::Regime;
use cachebeacon::harness::config::HarnessConfig;
use cachebeacon::harness::matrix::{run_matrix, write_outputs, MatrixOutput};
use cachebeacon::harness::metrics::{halving_bound, probe_audit};
use cachebeacon::harness::scenario::prepare;
use cachebeacon::machine::Technique;
use cachebeacon::model::{compute_k, fit, BeaconKind, MissModel, TrainingSample};
use cachebeacon::scheduler::SchedulerKind;
use cachebeacon::workload::{ground_truth_misses, BoundSpec, Loop, LoopId, LoopNest, Stmt};

struct Verdict {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(id: &'static str, title: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { id, title, pass, detail }
}

struct Timed {
    out: MatrixOutput,
    elapsed: Duration,
}

fn run(cfg: &HarnessConfig) -> Timed {
    let t = Instant::now();
    let prep = prepare(cfg).expect("training");
    let out = run_matrix(cfg, &prep).expect("matrix");
    Timed { out, elapsed: t.elapsed() }
}

fn accurate_cfg() -> HarnessConfig {
    HarnessConfig::default()
}

fn degraded_cfg() -> HarnessConfig {
    HarnessConfig {
        regime: Regime::Degraded,
        ..HarnessConfig::default()
    }
}

fn stress_cfg() -> HarnessConfig {
    HarnessConfig {
        stress: true,
        techniques: vec!["flush_reload".into(), "none".into()],
        process_counts: vec![6, 12],
        seeds: (1..=5).collect(),
        ..HarnessConfig::default()
    }
}

// ---- model recovery suite ----

struct SynthNest {
    nest: LoopNest,
    id: LoopId,
}

fn synth_suite(count: usize, noise: f64, seed: u64) -> Vec<SynthNest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let depth = 1 + i % 3;
            let coeffs: Vec<f64> = (0..=depth).map(|_| rng.random_range(0.5..50.0)).collect();
            let mut l = Loop::new(format!("s{i}.l{}", depth - 1), BoundSpec::Constant(4)).with_body(vec![Stmt::Work(10)]);
            for d in (0..depth - 1).rev() {
                l = Loop::new(format!("s{i}.l{d}"), BoundSpec::Constant(4)).with_body(vec![Stmt::Loop(l)]);
            }
            let nest = LoopNest::new(l, coeffs, noise).expect("valid nest");
            SynthNest { id: nest.id().clone(), nest }
        })
        .collect()
}

const GRID: [u64; 4] = [4, 5, 7, 10];

fn grid(depth: usize) -> Vec<Vec<u64>> {
    let mut pts = vec![Vec::new()];
    for _ in 0..depth {
        pts = pts
            .into_iter()
            .flat_map(|p| {
                GRID.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    pts
}

fn samples(n: &SynthNest, repeats: usize, rng: &mut ChaCha8Rng) -> Vec<TrainingSample> {
    let depth = n.nest.true_coeffs.len() - 1;
    let mut out = Vec::new();
    for b in grid(depth) {
        for _ in 0..repeats {
            out.push(TrainingSample {
                loop_id: n.id.clone(),
                bounds: b.iter().map(|&x| x as f64).collect(),
                observed_misses: ground_truth_misses(&n.nest, &b, rng).unwrap(),
            });
        }
    }
    out
}

fn criterion_1() -> Vec<Verdict> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc1);

    let clean = synth_suite(24, 0.0, 1);
    let mut worst = 0.0_f64;
    for n in &clean {
        let fitted = fit(&samples(n, 1, &mut rng)).expect("noiseless fit");
        for (f, c) in fitted.iter().zip(&n.nest.true_coeffs) {
            worst = worst.max(((f - c) / c).abs());
        }
    }

    let noisy = synth_suite(24, 0.05, 2);
    let mut runs = BTreeMap::new();
    let top = *GRID.last().unwrap();
    for n in &noisy {
        let depth = n.nest.true_coeffs.len() - 1;
        let r: Vec<f64> = (0..8).map(|_| ground_truth_misses(&n.nest, &vec![top; depth], &mut rng).unwrap()).collect();
        runs.insert(n.id.clone(), r);
    }
    let k = compute_k(&runs).expect("dispersion");
    let (mut covered, mut total) = (0usize, 0usize);
    for n in &noisy {
        let depth = n.nest.true_coeffs.len() - 1;
        let model = MissModel {
            loop_id: n.id.clone(),
            coeffs: fit(&samples(n, 2, &mut rng)).expect("noisy fit"),
            k,
            kind: BeaconKind::Precise,
            expected_bounds: Vec::new(),
        };
        for _ in 0..50 {
            let b: Vec<u64> = (0..depth).map(|_| rng.random_range(GRID[0]..=top)).collect();
            let observed = ground_truth_misses(&n.nest, &b, &mut rng).unwrap();
            let upper = model.predict_upper(&b.iter().map(|&x| x as f64).collect::<Vec<_>>()).unwrap();
            covered += (observed <= upper) as usize;
            total += 1;
        }
    }
    let coverage = covered as f64 / total as f64;
    let secs = t.elapsed().as_secs_f64();
    vec![
        verdict(
            "1a",
            "noiseless recovery within 1e-6",
            worst <= 1e-6 && secs < 5.0,
            format!("{} nests, depths 1-3, worst rel err {worst:.2e}, {secs:.2}s", clean.len()),
        ),
        verdict(
            "1b",
            "CM(U) covers >= 95% of held-out noisy runs",
            coverage >= 0.95 && secs < 5.0,
            format!("noise 0.05, k = {k:.4}, coverage {coverage:.4} over {total} runs"),
        ),
    ]
}

fn attacked_biscuit(out: &MatrixOutput) -> impl Iterator<Item = &cachebeacon::harness::report::ScenarioReport> {
    out.runs
        .iter()
        .map(|r| &r.report)
        .filter(|r| r.scheduler == SchedulerKind::Biscuit && r.technique.is_some())
}

fn criterion_2(acc: &Timed) -> Verdict {
    let attacked: Vec<_> = attacked_biscuit(&acc.out).collect();
    let exact = attacked.iter().filter(|r| r.attacker.is_some() && r.flagged == vec![r.attacker.unwrap()]).count();
    let s = &acc.out.summary;
    let no_attack = s.no_attack.fp + s.no_attack.tn;
    let fp_rate = s.fp_rate().unwrap_or(f64::NAN);
    let secs = acc.elapsed.as_secs_f64();
    verdict(
        "2",
        "accurate models: attacker always flagged, no false positives",
        attacked.len() >= 60 && exact == attacked.len() && no_attack >= 40 && fp_rate == 0.0 && secs < 60.0,
        format!(
            "attacker alone flagged in {exact}/{} attacked runs, fp rate {fp_rate:.3} over {no_attack} attack-free runs, {secs:.1}s",
            attacked.len()
        ),
    )
}

fn criterion_3(deg: &Timed) -> Verdict {
    let s = &deg.out.summary;
    let f = s.overall.f_score().unwrap_or(0.0);
    let fp_rate = s.fp_rate().unwrap_or(f64::NAN);
    let acc = s.model_accuracy.value().unwrap_or(0.0);
    let in_regime = (0.83..=0.90).contains(&acc);
    let live = s.exonerated == s.false_flags;
    verdict(
        "3",
        "degraded models: F >= 0.90, FP rate <= 5%, false positives complete",
        in_regime && f >= 0.90 && fp_rate <= 0.05 && live,
        format!(
            "model accuracy {acc:.3}, F {f:.3} (tp={} fp={} fn={}), fp rate {fp_rate:.3}, exonerated {}/{}",
            s.overall.tp, s.overall.fp, s.overall.fn_, s.exonerated, s.false_flags
        ),
    )
}

fn criterion_4(acc: &Timed, deg: &Timed) -> Verdict {
    let s = &acc.out.summary;
    let d = |t| s.mean_d(SchedulerKind::Biscuit, t).unwrap_or(f64::NAN);
    let (fr, ff, pp) = (d(Technique::FlushReload), d(Technique::FlushFlush), d(Technique::PrimeProbe));
    let all = || acc.out.runs.iter().chain(&deg.out.runs).map(|r| &r.report).filter(|r| r.technique.is_some());
    let baseline_nonzero = all()
        .filter(|r| r.scheduler == SchedulerKind::Baseline && r.detection_efficiency != Some(0.0))
        .count();
    let biscuit_out_of_range = all()
        .filter(|r| r.scheduler == SchedulerKind::Biscuit)
        .filter(|r| !matches!(r.detection_efficiency, Some(d) if d > 0.0 && d <= 1.0))
        .count();
    verdict(
        "4",
        "mean D: flush techniques above prime+probe, baseline always 0",
        fr > pp && ff > pp && baseline_nonzero == 0 && biscuit_out_of_range == 0,
        format!(
            "D flush_reload {fr:.3}, flush_flush {ff:.3}, prime_probe {pp:.3}; baseline D != 0 in {baseline_nonzero} runs, D outside (0,1] in {biscuit_out_of_range} runs"
        ),
    )
}

fn criterion_5(all: &[&Timed], limit: usize) -> Verdict {
    let (mut episodes, mut over, mut max_n, mut max_h, mut max_l) = (0, 0, 0, 0, 0);
    for t in all {
        for run in &t.out.runs {
            for a in probe_audit(&run.schedule) {
                episodes += 1;
                max_n = max_n.max(a.suspects);
                max_h = max_h.max(a.halving);
                max_l = max_l.max(a.linear);
                if a.halving > halving_bound(a.suspects, limit) || a.linear > limit {
                    over += 1;
                }
            }
        }
    }
    verdict(
        "5",
        "probe counts within log2 halving and linear bounds",
        episodes > 0 && over == 0,
        format!("{episodes} episodes from schedule logs, {over} over bound; max suspects {max_n}, halving {max_h}, linear {max_l}"),
    )
}

fn criterion_6(all: &[&Timed]) -> Verdict {
    let mut ticks = 0;
    let mut runs = 0;
    for t in all {
        for r in t.out.runs.iter().map(|r| &r.report).filter(|r| r.scheduler == SchedulerKind::Biscuit) {
            ticks += r.capacity_violations;
            runs += 1;
        }
    }
    let failed = all.iter().filter(|t| t.out.failed()).count();
    verdict(
        "6",
        "socket capacity never exceeded",
        ticks == 0 && failed == 0,
        format!("{ticks} over-capacity ticks across {runs} runs, {failed} matrices with invariant failures"),
    )
}

fn criterion_7(acc: &Timed, stress: &Timed) -> Verdict {
    let s = &acc.out.summary;
    let idle = s.overhead_no_attack.value().unwrap_or(f64::NAN);
    let attacked = s.overhead_attacked.value().unwrap_or(f64::NAN);
    let reduction = stress.out.summary.stress_reduction.value().unwrap_or(f64::NAN);
    verdict(
        "7",
        "overhead <= 6% idle, <= 11% attacked; stress slowdown cut >= 30%",
        idle <= 0.06 && attacked <= 0.11 && reduction >= 0.30,
        format!(
            "overhead {:.2}% idle (max {:.2}%), {:.2}% attacked; stress reduction {:.1}% over {} pairs",
            idle * 100.0,
            s.overhead_no_attack.max.unwrap_or(f64::NAN) * 100.0,
            attacked * 100.0,
            reduction * 100.0,
            stress.out.summary.stress_reduction.count
        ),
    )
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect()
}

fn criterion_8(deg: &Timed) -> Verdict {
    // Re-run from scratch on one worker; the first run used the default pool.
    let cfg = HarnessConfig {
        workers: 1,
        ..degraded_cfg()
    };
    let again = run(&cfg);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_outputs(&deg.out, a.path()).unwrap();
    write_outputs(&again.out, b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    let differing = fa.iter().filter(|(name, bytes)| fb.get(*name) != Some(bytes)).count();
    verdict(
        "8",
        "re-runs produce byte-identical report files",
        fa.len() == fb.len() && differing == 0 && !fa.is_empty(),
        format!("{} files compared, {differing} differ", fa.len()),
    )
}

fn main() -> ExitCode {
    let mut verdicts = criterion_1();
    let acc = run(&accurate_cfg());
    let deg = run(&degraded_cfg());
    let stress = run(&stress_cfg());
    let limit = HarnessConfig::default().mitigation.linear_limit;
    verdicts.push(criterion_2(&acc));
    verdicts.push(criterion_3(&deg));
    verdicts.push(criterion_4(&acc, &deg));
    verdicts.push(criterion_5(&[&acc, &deg, &stress], limit));
    verdicts.push(criterion_6(&[&acc, &deg, &stress]));
    verdicts.push(criterion_7(&acc, &stress));
    verdicts.push(criterion_8(&deg));

    println!();
    for v in &verdicts {
        println!(
            "acceptance {:<3} {} {:<66} {}",
            v.id,
            if v.pass { "PASS" } else { "FAIL" },
            v.title,
            v.detail
        );
    }
    let failed = verdicts.iter().filter(|v| !v.pass).count();
    println!("\nacceptance: {} passed, {failed} failed\n", verdicts.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
