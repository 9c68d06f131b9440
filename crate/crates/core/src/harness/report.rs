//! Per-scenario reports as versioned CSV.
//!
//! Layout: a version row, a column header, then `section,id,field,value` rows.
//! Floats are written in shortest round-trip form so a report re-reads to the
//! exact values it was written from.

use std::io::{Read, Write};
use std::str::FromStr;

use super::catalog::Regime;
use super::HarnessError;
use crate::machine::{Pid, Technique};
use crate::scheduler::SchedulerKind;

pub const REPORT_FORMAT: &str = "cachebeacon-scenario-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessRow {
    pub pid: Pid,
    pub program: String,
    /// `victim`, `corunner` or `attacker`.
    pub role: String,
    pub arrival: u64,
    pub finished_at: Option<u64>,
    pub instructions: f64,
    pub misses: f64,
    pub misses_attack: f64,
}

impl ProcessRow {
    pub fn wall_ticks(&self) -> Option<u64> {
        self.finished_at.map(|f| f - self.arrival)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRow {
    pub id: usize,
    pub victim: Pid,
    pub socket: usize,
    pub suspects: usize,
    pub halving_probes: usize,
    pub linear_probes: usize,
    pub flagged: Option<Pid>,
    pub started: u64,
    pub ended: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioReport {
    pub name: String,
    pub regime: Regime,
    pub stress: bool,
    pub scheduler: SchedulerKind,
    pub technique: Option<Technique>,
    pub process_count: usize,
    pub seed: u64,
    pub capacity: f64,
    pub k: f64,
    pub victim: Pid,
    pub attacker: Option<Pid>,
    pub flagged: Vec<Pid>,
    pub tp: u32,
    pub fp: u32,
    pub fn_: u32,
    pub tn: u32,
    /// Falsely flagged processes that still ran to completion.
    pub exonerated: usize,
    pub attack_start: Option<u64>,
    pub thwarted_at: Option<u64>,
    /// Tick the victim finished in the baseline twin.
    pub full_end: Option<u64>,
    pub detection_efficiency: Option<f64>,
    pub victim_end: Option<u64>,
    pub end_tick: u64,
    pub timed_out: bool,
    pub alarms: usize,
    pub region_count: usize,
    pub accuracy_sum: f64,
    /// Regions whose true misses stayed under the upper bound.
    pub covered: usize,
    pub capacity_violations: usize,
    pub protocol_errors: usize,
    pub trace_valid: bool,
    pub processes: Vec<ProcessRow>,
    pub episodes: Vec<EpisodeRow>,
}

impl ScenarioReport {
    pub fn victim_ticks(&self) -> Option<u64> {
        self.processes.iter().find(|p| p.pid == self.victim).and_then(ProcessRow::wall_ticks)
    }

    pub fn false_flags(&self) -> usize {
        self.flagged.iter().filter(|p| Some(**p) != self.attacker).count()
    }

    /// Problems that make a run invalid regardless of its metrics.
    pub fn invariant_failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = &self.name;
        if self.capacity_violations > 0 {
            out.push(format!("{n}: {} capacity violations", self.capacity_violations));
        }
        if self.protocol_errors > 0 {
            out.push(format!("{n}: {} beacon protocol errors", self.protocol_errors));
        }
        if !self.trace_valid {
            out.push(format!("{n}: beacon trace is unbalanced"));
        }
        if self.timed_out {
            out.push(format!("{n}: hit the tick cap at {}", self.end_tick));
        }
        if self.exonerated != self.false_flags() {
            out.push(format!("{n}: a falsely flagged process never completed"));
        }
        if let Some(d) = self.detection_efficiency {
            if !(0.0..=1.0).contains(&d) {
                out.push(format!("{n}: detection efficiency {d} outside [0, 1]"));
            }
        }
        out
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        let mut rows: Vec<[String; 4]> = Vec::new();
        let mut meta = |field: &str, value: String| rows.push(["meta".into(), String::new(), field.into(), value]);
        meta("name", self.name.clone());
        meta("regime", self.regime.name().into());
        meta("stress", self.stress.to_string());
        meta("scheduler", self.scheduler.name().into());
        meta("technique", self.technique.map_or("none", Technique::name).into());
        meta("process_count", self.process_count.to_string());
        meta("seed", self.seed.to_string());
        meta("capacity", self.capacity.to_string());
        meta("k", self.k.to_string());
        let mut res = |field: &str, value: String| rows.push(["result".into(), String::new(), field.into(), value]);
        res("victim", self.victim.to_string());
        res("attacker", opt(self.attacker));
        res("flagged", self.flagged.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(";"));
        res("tp", self.tp.to_string());
        res("fp", self.fp.to_string());
        res("fn", self.fn_.to_string());
        res("tn", self.tn.to_string());
        res("exonerated", self.exonerated.to_string());
        res("attack_start", opt(self.attack_start));
        res("thwarted_at", opt(self.thwarted_at));
        res("full_end", opt(self.full_end));
        res("detection_efficiency", opt(self.detection_efficiency));
        res("victim_end", opt(self.victim_end));
        res("end_tick", self.end_tick.to_string());
        res("timed_out", self.timed_out.to_string());
        res("alarms", self.alarms.to_string());
        res("region_count", self.region_count.to_string());
        res("accuracy_sum", self.accuracy_sum.to_string());
        res("covered", self.covered.to_string());
        res("capacity_violations", self.capacity_violations.to_string());
        res("protocol_errors", self.protocol_errors.to_string());
        res("trace_valid", self.trace_valid.to_string());
        for p in &self.processes {
            let id = p.pid.to_string();
            for (f, v) in [
                ("program", p.program.clone()),
                ("role", p.role.clone()),
                ("arrival", p.arrival.to_string()),
                ("finished_at", opt(p.finished_at)),
                ("wall_ticks", opt(p.wall_ticks())),
                ("instructions", p.instructions.to_string()),
                ("misses", p.misses.to_string()),
                ("misses_attack", p.misses_attack.to_string()),
            ] {
                rows.push(["process".into(), id.clone(), f.into(), v]);
            }
        }
        for e in &self.episodes {
            let id = e.id.to_string();
            for (f, v) in [
                ("victim", e.victim.to_string()),
                ("socket", e.socket.to_string()),
                ("suspects", e.suspects.to_string()),
                ("halving_probes", e.halving_probes.to_string()),
                ("linear_probes", e.linear_probes.to_string()),
                ("flagged", opt(e.flagged)),
                ("started", e.started.to_string()),
                ("ended", opt(e.ended)),
            ] {
                rows.push(["episode".into(), id.clone(), f.into(), v]);
            }
        }
        let csv_err = |e: csv::Error| HarnessError::Report(e.to_string());
        w.write_record([REPORT_FORMAT, &format!("v{REPORT_VERSION}")]).map_err(csv_err)?;
        w.write_record(["section", "id", "field", "value"]).map_err(csv_err)?;
        for r in rows {
            w.write_record(&r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| HarnessError::Report(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read<R: Read>(input: R) -> Result<Self, HarnessError> {
        let mut r = csv::ReaderBuilder::new().flexible(true).has_headers(false).from_reader(input);
        let mut records = r.records();
        let bad = |m: String| HarnessError::Report(m);
        let version = records
            .next()
            .ok_or_else(|| bad("empty report".into()))?
            .map_err(|e| bad(e.to_string()))?;
        if version.get(0) != Some(REPORT_FORMAT) || version.get(1) != Some(&format!("v{REPORT_VERSION}")) {
            return Err(bad(format!("unsupported report header {version:?}")));
        }
        records.next();
        let mut meta = std::collections::BTreeMap::new();
        let mut procs: std::collections::BTreeMap<Pid, std::collections::BTreeMap<String, String>> = Default::default();
        let mut eps: std::collections::BTreeMap<usize, std::collections::BTreeMap<String, String>> = Default::default();
        for rec in records {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let (section, id, field, value) = (
                rec.get(0).unwrap_or(""),
                rec.get(1).unwrap_or(""),
                rec.get(2).unwrap_or("").to_string(),
                rec.get(3).unwrap_or("").to_string(),
            );
            match section {
                "meta" | "result" => {
                    meta.insert(field, value);
                }
                "process" => {
                    procs.entry(parse(id, "pid")?).or_default().insert(field, value);
                }
                "episode" => {
                    eps.entry(parse(id, "episode id")?).or_default().insert(field, value);
                }
                other => return Err(bad(format!("unknown section {other}"))),
            }
        }
        let get = |m: &std::collections::BTreeMap<String, String>, f: &str| -> Result<String, HarnessError> {
            m.get(f).cloned().ok_or_else(|| HarnessError::Report(format!("missing field {f}")))
        };
        let technique = match get(&meta, "technique")?.as_str() {
            "none" => None,
            t => Some(Technique::parse(t).ok_or_else(|| bad(format!("bad technique {t}")))?),
        };
        let flagged_s = get(&meta, "flagged")?;
        let flagged = if flagged_s.is_empty() {
            Vec::new()
        } else {
            flagged_s.split(';').map(|p| parse(p, "flagged pid")).collect::<Result<_, _>>()?
        };
        let processes = procs
            .into_iter()
            .map(|(pid, m)| {
                Ok(ProcessRow {
                    pid,
                    program: get(&m, "program")?,
                    role: get(&m, "role")?,
                    arrival: parse(&get(&m, "arrival")?, "arrival")?,
                    finished_at: parse_opt(&get(&m, "finished_at")?)?,
                    instructions: parse(&get(&m, "instructions")?, "instructions")?,
                    misses: parse(&get(&m, "misses")?, "misses")?,
                    misses_attack: parse(&get(&m, "misses_attack")?, "misses_attack")?,
                })
            })
            .collect::<Result<_, HarnessError>>()?;
        let episodes = eps
            .into_iter()
            .map(|(id, m)| {
                Ok(EpisodeRow {
                    id,
                    victim: parse(&get(&m, "victim")?, "victim")?,
                    socket: parse(&get(&m, "socket")?, "socket")?,
                    suspects: parse(&get(&m, "suspects")?, "suspects")?,
                    halving_probes: parse(&get(&m, "halving_probes")?, "halving_probes")?,
                    linear_probes: parse(&get(&m, "linear_probes")?, "linear_probes")?,
                    flagged: parse_opt(&get(&m, "flagged")?)?,
                    started: parse(&get(&m, "started")?, "started")?,
                    ended: parse_opt(&get(&m, "ended")?)?,
                })
            })
            .collect::<Result<_, HarnessError>>()?;
        let f = |name: &str| get(&meta, name);
        Ok(ScenarioReport {
            name: f("name")?,
            regime: match f("regime")?.as_str() {
                "accurate" => Regime::Accurate,
                "degraded" => Regime::Degraded,
                r => return Err(bad(format!("bad regime {r}"))),
            },
            stress: parse(&f("stress")?, "stress")?,
            scheduler: SchedulerKind::parse(&f("scheduler")?).ok_or_else(|| bad("bad scheduler".into()))?,
            technique,
            process_count: parse(&f("process_count")?, "process_count")?,
            seed: parse(&f("seed")?, "seed")?,
            capacity: parse(&f("capacity")?, "capacity")?,
            k: parse(&f("k")?, "k")?,
            victim: parse(&f("victim")?, "victim")?,
            attacker: parse_opt(&f("attacker")?)?,
            flagged,
            tp: parse(&f("tp")?, "tp")?,
            fp: parse(&f("fp")?, "fp")?,
            fn_: parse(&f("fn")?, "fn")?,
            tn: parse(&f("tn")?, "tn")?,
            exonerated: parse(&f("exonerated")?, "exonerated")?,
            attack_start: parse_opt(&f("attack_start")?)?,
            thwarted_at: parse_opt(&f("thwarted_at")?)?,
            full_end: parse_opt(&f("full_end")?)?,
            detection_efficiency: parse_opt(&f("detection_efficiency")?)?,
            victim_end: parse_opt(&f("victim_end")?)?,
            end_tick: parse(&f("end_tick")?, "end_tick")?,
            timed_out: parse(&f("timed_out")?, "timed_out")?,
            alarms: parse(&f("alarms")?, "alarms")?,
            region_count: parse(&f("region_count")?, "region_count")?,
            accuracy_sum: parse(&f("accuracy_sum")?, "accuracy_sum")?,
            covered: parse(&f("covered")?, "covered")?,
            capacity_violations: parse(&f("capacity_violations")?, "capacity_violations")?,
            protocol_errors: parse(&f("protocol_errors")?, "protocol_errors")?,
            trace_valid: parse(&f("trace_valid")?, "trace_valid")?,
            processes,
            episodes,
        })
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse<T: FromStr>(s: &str, what: &str) -> Result<T, HarnessError> {
    s.parse().map_err(|_| HarnessError::Report(format!("bad {what}: `{s}`")))
}

fn parse_opt<T: FromStr>(s: &str) -> Result<Option<T>, HarnessError> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse(s, "value").map(Some)
    }
}
