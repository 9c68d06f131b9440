//! Metrics computed from scenario reports and schedule logs.

use std::collections::BTreeMap;
use std::io::Write;

use super::catalog::Regime;
use super::report::ScenarioReport;
use super::HarnessError;
use crate::machine::Technique;
use crate::scheduler::{Action, ScheduleEvent, SchedulerKind};

pub const SUMMARY_FORMAT: &str = "cachebeacon-summary";
pub const SUMMARY_VERSION: u32 = 1;

/// `1 - thwarted / full`, clamped to `[0, 1]`; a non-positive full duration counts as instant.
pub fn detection_efficiency(attack_start: u64, thwarted: u64, full_duration: u64) -> f64 {
    if full_duration == 0 {
        return 1.0;
    }
    let active = thwarted.saturating_sub(attack_start) as f64;
    (1.0 - active / full_duration as f64).clamp(0.0, 1.0)
}

/// `2TP / (2TP + FP + FN)`; `None` when every count is zero.
pub fn f_score(tp: u64, fp: u64, fn_: u64) -> Option<f64> {
    let d = 2 * tp + fp + fn_;
    (d > 0).then(|| 2.0 * tp as f64 / d as f64)
}

pub fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Upper bound on halving rounds for `n` initial suspects.
pub fn halving_bound(n: usize, linear_limit: usize) -> usize {
    let r = n.max(linear_limit) as f64 / linear_limit as f64;
    r.log2().ceil() as usize
}

/// Probe counts of one episode, reconstructed from the schedule log.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeAudit {
    pub episode: usize,
    pub suspects: usize,
    pub halving: usize,
    pub linear: usize,
}

fn parse_reason(reason: &str) -> Option<(&str, usize, usize)> {
    let mut parts = reason.split(':');
    let kind = parts.next()?;
    let ep = parts.next()?.strip_prefix("ep=")?.parse().ok()?;
    let n = parts.next()?.strip_prefix("n=")?.parse().ok()?;
    Some((kind, ep, n))
}

/// Every mitigation episode in a log with its probe counts.
pub fn probe_audit(log: &[ScheduleEvent]) -> Vec<ProbeAudit> {
    let mut by_ep: BTreeMap<usize, (usize, Vec<u64>, usize)> = BTreeMap::new();
    for e in log {
        let Some((kind, ep, n)) = parse_reason(&e.reason) else { continue };
        let entry = by_ep.entry(ep).or_insert((n, Vec::new(), 0));
        match (kind, e.action) {
            ("halving", Action::Deschedule) => {
                if entry.1.last() != Some(&e.tick) {
                    entry.1.push(e.tick);
                }
            }
            ("linear", Action::Deschedule) => entry.2 += 1,
            _ => {}
        }
    }
    by_ep
        .into_iter()
        .map(|(episode, (suspects, halving, linear))| ProbeAudit {
            episode,
            suspects,
            halving: halving.len(),
            linear,
        })
        .collect()
}

/// Reads a schedule log written by [`crate::scheduler::Scheduler::write_log`].
pub fn read_schedule<R: std::io::Read>(input: R) -> Result<Vec<ScheduleEvent>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |m: String| HarnessError::Report(m);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let action = match f(2) {
            "place" => Action::Place,
            "migrate" => Action::Migrate,
            "swap" => Action::Swap,
            "deschedule" => Action::Deschedule,
            "resume" => Action::Resume,
            "flag" => Action::Flag,
            a => return Err(bad(format!("bad action {a}"))),
        };
        out.push(ScheduleEvent {
            tick: f(0).parse().map_err(|_| bad(format!("bad tick {}", f(0))))?,
            pid: f(1).parse().map_err(|_| bad(format!("bad pid {}", f(1))))?,
            action,
            socket: if f(3).is_empty() { None } else { f(3).parse().ok() },
            reason: f(4).to_string(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    fn add(&mut self, r: &ScenarioReport) {
        self.tp += r.tp as u64;
        self.fp += r.fp as u64;
        self.fn_ += r.fn_ as u64;
        self.tn += r.tn as u64;
    }

    pub fn f_score(&self) -> Option<f64> {
        f_score(self.tp, self.fp, self.fn_)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mean {
    pub sum: f64,
    pub count: u64,
    pub max: Option<f64>,
}

impl Mean {
    fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
        self.max = Some(self.max.map_or(v, |m: f64| m.max(v)));
    }

    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Aggregate metrics; every field derives from the reports alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub scenarios: usize,
    /// Footprint-aware scheduler, per attack technique (attacked runs only).
    pub per_technique: BTreeMap<String, Confusion>,
    /// Footprint-aware scheduler, attacked and attack-free runs together.
    pub overall: Confusion,
    /// Attack-free runs under the footprint-aware scheduler.
    pub no_attack: Confusion,
    pub mean_d: BTreeMap<(String, String), Mean>,
    pub overhead_no_attack: Mean,
    pub overhead_attacked: Mean,
    pub stress_reduction: Mean,
    pub model_accuracy: Mean,
    pub region_coverage: Mean,
    pub false_flags: u64,
    pub exonerated: u64,
    pub episodes: u64,
    pub invariant_failures: Vec<String>,
}

impl Summary {
    pub fn fp_rate(&self) -> Option<f64> {
        ratio(self.no_attack.fp, self.no_attack.fp + self.no_attack.tn)
    }

    pub fn f_score(&self, technique: &str) -> Option<f64> {
        self.per_technique.get(technique).and_then(Confusion::f_score)
    }

    pub fn mean_d(&self, scheduler: SchedulerKind, technique: Technique) -> Option<f64> {
        self.mean_d
            .get(&(scheduler.name().to_string(), technique.name().to_string()))
            .and_then(Mean::value)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        let err = |e: csv::Error| HarnessError::Report(e.to_string());
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        let mut rows: Vec<[String; 4]> = vec![["scenarios".into(), String::new(), self.scenarios.to_string(), String::new()]];
        for (t, c) in &self.per_technique {
            rows.push(["f_score".into(), t.clone(), show(c.f_score()), format!("tp={} fp={} fn={}", c.tp, c.fp, c.fn_)]);
        }
        let o = &self.overall;
        rows.push(["f_score".into(), "all".into(), show(o.f_score()), format!("tp={} fp={} fn={} tn={}", o.tp, o.fp, o.fn_, o.tn)]);
        let na = &self.no_attack;
        rows.push(["fp_rate".into(), "no_attack".into(), show(self.fp_rate()), format!("fp={} tn={}", na.fp, na.tn)]);
        for ((s, t), m) in &self.mean_d {
            rows.push(["mean_d".into(), format!("{s}/{t}"), show(m.value()), format!("n={}", m.count)]);
        }
        for (name, group, m) in [
            ("overhead", "no_attack", &self.overhead_no_attack),
            ("overhead", "attacked", &self.overhead_attacked),
            ("stress_reduction", "", &self.stress_reduction),
            ("model_accuracy", "no_attack", &self.model_accuracy),
            ("region_coverage", "no_attack", &self.region_coverage),
        ] {
            rows.push([name.into(), group.into(), show(m.value()), format!("n={} max={}", m.count, show(m.max))]);
        }
        rows.push(["exoneration".into(), String::new(), format!("{}/{}", self.exonerated, self.false_flags), String::new()]);
        rows.push(["episodes".into(), String::new(), self.episodes.to_string(), String::new()]);
        rows.push(["invariant_failures".into(), String::new(), self.invariant_failures.len().to_string(), String::new()]);
        w.write_record([SUMMARY_FORMAT, &format!("v{SUMMARY_VERSION}")]).map_err(err)?;
        w.write_record(["metric", "group", "value", "detail"]).map_err(err)?;
        for r in rows {
            w.write_record(&r).map_err(err)?;
        }
        for f in &self.invariant_failures {
            w.write_record(["failure", "", f.as_str(), ""]).map_err(err)?;
        }
        w.flush().map_err(|e| HarnessError::Report(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8")
    }
}

type PairKey = (Regime, bool, Option<Technique>, usize, u64);

fn pair_key(r: &ScenarioReport) -> PairKey {
    (r.regime, r.stress, r.technique, r.process_count, r.seed)
}

/// Reduces reports to the summary metrics.
pub fn score(reports: &[ScenarioReport]) -> Summary {
    let mut s = Summary {
        scenarios: reports.len(),
        ..Summary::default()
    };
    let mut pairs: BTreeMap<PairKey, BTreeMap<&'static str, &ScenarioReport>> = BTreeMap::new();
    for r in reports {
        s.invariant_failures.extend(r.invariant_failures());
        pairs.entry(pair_key(r)).or_default().insert(r.scheduler.name(), r);
        if let Some(d) = r.detection_efficiency.filter(|_| r.technique.is_some()) {
            let t = r.technique.map_or("none", Technique::name);
            s.mean_d
                .entry((r.scheduler.name().to_string(), t.to_string()))
                .or_default()
                .push(d);
        }
        if r.scheduler != SchedulerKind::Biscuit {
            continue;
        }
        s.episodes += r.episodes.len() as u64;
        s.false_flags += r.false_flags() as u64;
        s.exonerated += r.exonerated as u64;
        s.overall.add(r);
        match r.technique {
            Some(t) => s.per_technique.entry(t.name().to_string()).or_default().add(r),
            None => {
                s.no_attack.add(r);
                if r.region_count > 0 {
                    s.model_accuracy.push(r.accuracy_sum / r.region_count as f64);
                    s.region_coverage.push(r.covered as f64 / r.region_count as f64);
                }
            }
        }
    }
    let mut stress: BTreeMap<(Regime, usize, u64), [Option<u64>; 4]> = BTreeMap::new();
    for ((regime, is_stress, technique, n, seed), by) in &pairs {
        let (Some(b), Some(base)) = (by.get("biscuit"), by.get("baseline")) else { continue };
        let (Some(tb), Some(tbase)) = (b.victim_ticks(), base.victim_ticks()) else { continue };
        if *is_stress {
            let slot = stress.entry((*regime, *n, *seed)).or_default();
            let i = if technique.is_some() { 0 } else { 2 };
            slot[i] = Some(tb);
            slot[i + 1] = Some(tbase);
            continue;
        }
        let overhead = (tb as f64 - tbase as f64) / tbase as f64;
        if technique.is_some() {
            s.overhead_attacked.push(overhead);
        } else {
            s.overhead_no_attack.push(overhead);
        }
    }
    for slot in stress.values() {
        if let [Some(b_att), Some(base_att), Some(b_none), Some(base_none)] = *slot {
            let slow_base = base_att as f64 - base_none as f64;
            if slow_base > 0.0 {
                s.stress_reduction.push(1.0 - (b_att as f64 - b_none as f64) / slow_base);
            }
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_efficiency_examples() {
        assert_eq!(detection_efficiency(0, 50, 100), 0.5);
        assert_eq!(detection_efficiency(10, 10, 100), 1.0);
        assert_eq!(detection_efficiency(0, 500, 100), 0.0);
    }

    #[test]
    fn f_score_examples() {
        assert_eq!(f_score(10, 0, 0), Some(1.0));
        assert_eq!(f_score(0, 0, 0), None);
        assert!((f_score(15, 1, 1).unwrap() - 30.0 / 32.0).abs() < 1e-12);
        assert_eq!(ratio(1, 20), Some(0.05));
        assert_eq!(ratio(0, 0), None);
    }

    #[test]
    fn halving_bound_matches_log2() {
        assert_eq!(halving_bound(3, 8), 0);
        assert_eq!(halving_bound(8, 8), 0);
        assert_eq!(halving_bound(9, 8), 1);
        assert_eq!(halving_bound(16, 8), 1);
        assert_eq!(halving_bound(17, 8), 2);
    }

    #[test]
    fn audit_counts_rounds_not_processes() {
        let ev = |tick, pid, action, reason: &str| ScheduleEvent {
            tick,
            pid,
            action,
            socket: Some(0),
            reason: reason.into(),
        };
        let log = vec![
            ev(10, 1, Action::Deschedule, "halving:ep=1:n=12"),
            ev(10, 2, Action::Deschedule, "halving:ep=1:n=12"),
            ev(20, 1, Action::Resume, "halving:ep=1"),
            ev(22, 5, Action::Deschedule, "linear:ep=1:n=12"),
            ev(24, 5, Action::Flag, "attacker:ep=1:n=12"),
            ev(40, 3, Action::Flag, "victim-fallback:ep=2:n=0"),
        ];
        assert_eq!(
            probe_audit(&log),
            vec![
                ProbeAudit {
                    episode: 1,
                    suspects: 12,
                    halving: 1,
                    linear: 1
                },
                ProbeAudit {
                    episode: 2,
                    suspects: 0,
                    halving: 0,
                    linear: 0
                },
            ]
        );
    }

    #[test]
    fn fp_rate_undefined_without_attack_free_runs() {
        let s = score(&[]);
        assert_eq!(s.fp_rate(), None);
        assert!(s.to_csv().contains("fp_rate,no_attack,undefined"));
    }
}
