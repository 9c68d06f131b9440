//! Tick-driven model of one server node: sockets with a shared last-level cache,
//! per-process counters, contention between co-resident processes, and
//! synthetic cache attackers.
//!
//! Cache capacity is expressed in footprint units, the same unit as predicted
//! misses of a loop nest. A process's instructions per tick shrink with the
//! extra misses it suffers, so contention and attacks slow it down.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beacon::{RegionRun, Segment};
use crate::workload::LoopId;

pub type Pid = usize;

#[derive(Debug, Error, PartialEq)]
pub enum MachineError {
    #[error("pid {0}: no instructions retired in the window")]
    UndefinedMpki(Pid),
    #[error("unknown pid {0}")]
    UnknownPid(Pid),
    #[error("socket {0} has no free core")]
    NoFreeCore(usize),
    #[error("invalid machine config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    pub sockets: usize,
    pub cores_per_socket: usize,
    /// Per-socket LLC capacity in footprint units.
    pub llc_capacity: f64,
    /// Instructions a process retires in one uncontended tick.
    pub instructions_per_tick: f64,
    pub cycles_per_tick: f64,
    /// Stall cycles per extra (contention or attack) miss.
    pub miss_penalty_cycles: f64,
    /// Fraction of throughput spent on monitoring; only charged when nonzero.
    pub monitoring_tax: f64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            sockets: 2,
            cores_per_socket: 14,
            llc_capacity: 4.0e6,
            instructions_per_tick: 2.0e6,
            cycles_per_tick: 2.0e6,
            miss_penalty_cycles: 200.0,
            monitoring_tax: 0.0,
        }
    }
}

impl MachineConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), MachineError> {
        let bad = |m: &str| Err(MachineError::Config(m.to_string()));
        if self.sockets == 0 || self.cores_per_socket == 0 {
            return bad("sockets and cores_per_socket must be >= 1");
        }
        if !(self.llc_capacity > 0.0) {
            return bad("llc_capacity must be positive");
        }
        if !(self.instructions_per_tick > 0.0 && self.cycles_per_tick > 0.0) {
            return bad("instructions_per_tick and cycles_per_tick must be positive");
        }
        if !(0.0..1.0).contains(&self.monitoring_tax) || self.miss_penalty_cycles < 0.0 {
            return bad("monitoring_tax must be in [0, 1) and miss_penalty_cycles >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Technique {
    FlushReload,
    FlushFlush,
    PrimeProbe,
}

impl Technique {
    pub const ALL: [Technique; 3] = [Technique::FlushReload, Technique::FlushFlush, Technique::PrimeProbe];

    pub fn name(self) -> &'static str {
        match self {
            Technique::FlushReload => "flush_reload",
            Technique::FlushFlush => "flush_flush",
            Technique::PrimeProbe => "prime_probe",
        }
    }

    pub fn parse(s: &str) -> Option<Technique> {
        Technique::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    Process(Pid),
    Library(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerSpec {
    pub technique: Technique,
    /// Extra victim misses per full-speed victim tick once fully ramped.
    pub induction_rate: f64,
    pub ramp_ticks: u64,
    pub target: AttackTarget,
    /// Cache occupancy of the attacker itself, in footprint units.
    pub footprint: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Running,
    Descheduled,
    Finished,
    Quarantined,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    pub instructions: f64,
    pub misses_base: f64,
    pub misses_contention: f64,
    pub misses_attack: f64,
}

impl Counters {
    pub fn misses(&self) -> f64 {
        self.misses_base + self.misses_contention + self.misses_attack
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenNest {
    pub loop_id: LoopId,
    pub predicted_upper: Option<f64>,
    /// Tick of the Enter event.
    pub entered: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct TickRecord {
    tick: u64,
    misses: f64,
    instructions: f64,
}

#[derive(Clone, Debug)]
pub struct ProcessState {
    pub pid: Pid,
    pub program: String,
    pub libraries: Vec<String>,
    pub placement: Option<(usize, usize)>,
    pub status: Status,
    pub counters: Counters,
    pub misses_in_current_nest: f64,
    pub open_nest: Option<OpenNest>,
    pub attack: Option<AttackerSpec>,
    pub arrival: u64,
    pub finished_at: Option<u64>,
    segments: Vec<Segment>,
    seg: usize,
    progress: f64,
    /// The region at `seg` has announced itself and may execute.
    entered: bool,
    /// Enter already emitted for the region at `seg`.
    announced: bool,
    warm_ticks: u64,
    history: Vec<TickRecord>,
}

impl ProcessState {
    pub fn is_alive(&self) -> bool {
        !matches!(self.status, Status::Finished)
    }

    pub fn socket(&self) -> Option<usize> {
        self.placement.map(|(s, _)| s)
    }

    /// The beacon region the process is about to run or is running.
    pub fn current_region(&self) -> Option<&RegionRun> {
        self.segments.get(self.seg).and_then(|s| s.region.as_ref())
    }

    /// True misses of the current region; zero outside regions.
    fn true_footprint(&self) -> f64 {
        if let (Some(a), true) = (&self.attack, self.is_spinning_attacker()) {
            return a.footprint;
        }
        match self.segments.get(self.seg) {
            Some(s) if s.region.is_some() && self.entered => s.misses,
            _ => 0.0,
        }
    }

    /// An attacker spawned by [`World::spawn_attacker`], as opposed to a program that also attacks.
    pub fn is_spinning_attacker(&self) -> bool {
        self.attack.is_some() && self.program == ATTACKER_PROGRAM
    }

    pub fn wall_ticks(&self) -> Option<u64> {
        self.finished_at.map(|f| f - self.arrival)
    }

    pub fn targets(&self, victim: &ProcessState) -> bool {
        match &self.attack {
            Some(AttackerSpec {
                target: AttackTarget::Process(p),
                ..
            }) => *p == victim.pid,
            Some(AttackerSpec {
                target: AttackTarget::Library(tag),
                ..
            }) => victim.libraries.contains(tag),
            None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MachineEvent {
    Enter { pid: Pid, run: RegionRun },
    Complete { pid: Pid, loop_id: LoopId },
    Finished { pid: Pid },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterRow {
    pub tick: u64,
    pub pid: Pid,
    pub delta: Counters,
}

pub const ATTACKER_PROGRAM: &str = "attacker";

/// Instructions for a never-ending attacker loop.
const ATTACKER_INSTRUCTIONS: f64 = 1.0e15;

pub struct World {
    pub config: MachineConfig,
    pub tick: u64,
    pub processes: Vec<ProcessState>,
    cores: Vec<Vec<Option<Pid>>>,
    trace: Option<Vec<CounterRow>>,
}

impl World {
    pub fn new(config: MachineConfig) -> Result<Self, MachineError> {
        config.validate()?;
        let cores = vec![vec![None; config.cores_per_socket]; config.sockets];
        Ok(World {
            config,
            tick: 0,
            processes: Vec::new(),
            cores,
            trace: None,
        })
    }

    pub fn enable_counter_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn counter_trace(&self) -> &[CounterRow] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Adds a descheduled process that will execute `segments` once placed.
    pub fn spawn(&mut self, program: &str, libraries: Vec<String>, segments: Vec<Segment>, attack: Option<AttackerSpec>) -> Pid {
        let pid = self.processes.len();
        self.processes.push(ProcessState {
            pid,
            program: program.to_string(),
            libraries,
            placement: None,
            status: Status::Descheduled,
            counters: Counters::default(),
            misses_in_current_nest: 0.0,
            open_nest: None,
            attack,
            arrival: self.tick,
            finished_at: None,
            segments,
            seg: 0,
            progress: 0.0,
            entered: false,
            announced: false,
            warm_ticks: 0,
            history: Vec::new(),
        });
        pid
    }

    /// A beacon-less attacker that spins until none of its targets is alive.
    pub fn spawn_attacker(&mut self, spec: AttackerSpec, own_mpki: f64) -> Pid {
        let seg = Segment {
            instructions: ATTACKER_INSTRUCTIONS,
            misses: ATTACKER_INSTRUCTIONS * own_mpki / 1000.0,
            region: None,
        };
        self.spawn(ATTACKER_PROGRAM, Vec::new(), vec![seg], Some(spec))
    }

    pub fn process(&self, pid: Pid) -> Result<&ProcessState, MachineError> {
        self.processes.get(pid).ok_or(MachineError::UnknownPid(pid))
    }

    pub fn free_core(&self, socket: usize) -> Option<usize> {
        self.cores.get(socket)?.iter().position(|c| c.is_none())
    }

    pub fn free_cores(&self, socket: usize) -> usize {
        self.cores[socket].iter().filter(|c| c.is_none()).count()
    }

    /// Processes holding a core on `socket`, paused or not, in pid order.
    pub fn residents(&self, socket: usize) -> Vec<Pid> {
        let mut v: Vec<Pid> = self.cores[socket].iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn running_on(&self, socket: usize) -> Vec<Pid> {
        let mut v = self.residents(socket);
        v.retain(|&p| self.processes[p].status == Status::Running);
        v
    }

    pub fn place(&mut self, pid: Pid, socket: usize) -> Result<(), MachineError> {
        let core = self.free_core(socket).ok_or(MachineError::NoFreeCore(socket))?;
        self.release_core(pid);
        let p = self.processes.get_mut(pid).ok_or(MachineError::UnknownPid(pid))?;
        self.cores[socket][core] = Some(pid);
        p.placement = Some((socket, core));
        p.status = Status::Running;
        Ok(())
    }

    fn release_core(&mut self, pid: Pid) {
        if let Some((s, c)) = self.processes.get(pid).and_then(|p| p.placement) {
            self.cores[s][c] = None;
        }
        if let Some(p) = self.processes.get_mut(pid) {
            p.placement = None;
        }
    }

    pub fn deschedule(&mut self, pid: Pid, status: Status) {
        self.release_core(pid);
        let p = &mut self.processes[pid];
        if p.is_alive() {
            p.status = status;
            p.warm_ticks = 0;
        }
    }

    /// Stops a process but keeps its core reserved.
    pub fn pause(&mut self, pid: Pid) {
        let p = &mut self.processes[pid];
        if p.status == Status::Running {
            p.status = Status::Descheduled;
        }
    }

    /// Restarts a paused process on its reserved core.
    pub fn unpause(&mut self, pid: Pid) {
        let p = &mut self.processes[pid];
        if p.status == Status::Descheduled && p.placement.is_some() {
            p.status = Status::Running;
        }
    }

    /// Exchanges the cores of two placed processes.
    pub fn swap(&mut self, a: Pid, b: Pid) {
        let (Some((sa, ca)), Some((sb, cb))) = (self.processes[a].placement, self.processes[b].placement) else {
            return;
        };
        self.cores[sa][ca] = Some(b);
        self.cores[sb][cb] = Some(a);
        self.processes[a].placement = Some((sb, cb));
        self.processes[b].placement = Some((sa, ca));
    }

    /// Lets the region announced by the last Enter event run.
    pub fn admit(&mut self, pid: Pid, predicted_upper: Option<f64>) {
        let tick = self.tick;
        let p = &mut self.processes[pid];
        if p.entered {
            return;
        }
        p.entered = true;
        p.misses_in_current_nest = 0.0;
        if let Some(run) = p.segments.get(p.seg).and_then(|s| s.region.as_ref()) {
            p.open_nest = Some(OpenNest {
                loop_id: run.loop_id.clone(),
                predicted_upper,
                entered: tick,
            });
        }
    }

    /// Whether `pid` sits at a region start that has been announced but not admitted.
    pub fn awaiting_admission(&self, pid: Pid) -> bool {
        let p = &self.processes[pid];
        p.announced && !p.entered
    }

    /// Extra misses per tick for every running process on `socket` from cache overflow.
    pub fn contention_misses(&self, socket: usize, baseline_per_tick: &[(Pid, f64)]) -> Vec<(Pid, f64)> {
        let ov = self.overflow(socket);
        baseline_per_tick.iter().map(|(p, b)| (*p, ov * b)).collect()
    }

    /// Fraction by which true footprints on `socket` exceed its capacity.
    pub fn overflow(&self, socket: usize) -> f64 {
        let total: f64 = self
            .running_on(socket)
            .iter()
            .map(|&p| self.processes[p].true_footprint())
            .sum();
        overflow_fraction(total, self.config.llc_capacity)
    }

    /// Misses per thousand instructions over the last `window` ticks.
    pub fn read_mpki(&self, pid: Pid, window: u64) -> Result<f64, MachineError> {
        let p = self.process(pid)?;
        let from = self.tick.saturating_sub(window);
        let (m, i) = p
            .history
            .iter()
            .rev()
            .take_while(|r| r.tick >= from)
            .fold((0.0, 0.0), |(m, i), r| (m + r.misses, i + r.instructions));
        if i <= 0.0 {
            return Err(MachineError::UndefinedMpki(pid));
        }
        Ok(1000.0 * m / i)
    }

    /// Advances the clock by one tick.
    #[allow(clippy::needless_range_loop, clippy::while_let_loop)]
    pub fn step(&mut self) -> Vec<MachineEvent> {
        let mut events = Vec::new();
        let overflow: Vec<f64> = (0..self.config.sockets).map(|s| self.overflow(s)).collect();
        // Attack rate each running process receives this tick.
        let mut induced = vec![0.0; self.processes.len()];
        let mut attacking = Vec::new();
        for a in &self.processes {
            let (Some(spec), Some(sock), Status::Running) = (&a.attack, a.socket(), a.status) else {
                continue;
            };
            let ramp = if spec.ramp_ticks == 0 {
                1.0
            } else {
                ((a.warm_ticks + 1) as f64 / spec.ramp_ticks as f64).min(1.0)
            };
            for v in &self.processes {
                if v.status == Status::Running && v.socket() == Some(sock) && a.targets(v) {
                    induced[v.pid] += spec.induction_rate * ramp;
                    if attacking.last() != Some(&a.pid) {
                        attacking.push(a.pid);
                    }
                }
            }
        }
        for &a in &attacking {
            self.processes[a].warm_ticks += 1;
        }
        let ipt = self.config.instructions_per_tick * (1.0 - self.config.monitoring_tax);
        let base_cpi = self.config.cycles_per_tick / ipt;
        let penalty = self.config.miss_penalty_cycles;
        let tick = self.tick;
        let mut rows = Vec::new();
        for pid in 0..self.processes.len() {
            let p = &mut self.processes[pid];
            if p.status != Status::Running {
                continue;
            }
            let ov = overflow[p.socket().expect("running process has a socket")];
            let attack_per_instr = induced[pid] / ipt;
            let mut budget = self.config.cycles_per_tick;
            let mut delta = Counters::default();
            let mut nest_misses = 0.0;
            loop {
                let Some(seg) = p.segments.get(p.seg) else { break };
                if seg.region.is_some() && !p.entered {
                    if !p.announced {
                        p.announced = true;
                        events.push(MachineEvent::Enter {
                            pid,
                            run: seg.region.clone().expect("checked"),
                        });
                    }
                    break;
                }
                let rho = if seg.instructions > 0.0 { seg.misses / seg.instructions } else { 0.0 };
                let cpi = base_cpi + (ov * rho + attack_per_instr) * penalty;
                let remaining = seg.instructions - p.progress;
                let possible = budget / cpi;
                let done = remaining.min(possible);
                delta.instructions += done;
                delta.misses_base += rho * done;
                delta.misses_contention += ov * rho * done;
                delta.misses_attack += attack_per_instr * done;
                if p.entered {
                    nest_misses += (rho * (1.0 + ov) + attack_per_instr) * done;
                }
                if remaining > possible {
                    p.progress += done;
                    break;
                }
                budget -= done * cpi;
                if let Some(run) = &seg.region {
                    events.push(MachineEvent::Complete {
                        pid,
                        loop_id: run.loop_id.clone(),
                    });
                }
                p.seg += 1;
                p.progress = 0.0;
                p.entered = false;
                p.announced = false;
                p.open_nest = None;
                if p.seg >= p.segments.len() {
                    break;
                }
            }
            p.counters.instructions += delta.instructions;
            p.counters.misses_base += delta.misses_base;
            p.counters.misses_contention += delta.misses_contention;
            p.counters.misses_attack += delta.misses_attack;
            if p.open_nest.is_some() {
                p.misses_in_current_nest += nest_misses;
            } else {
                p.misses_in_current_nest = 0.0;
            }
            p.history.push(TickRecord {
                tick,
                misses: delta.misses(),
                instructions: delta.instructions,
            });
            if self.trace.is_some() {
                rows.push(CounterRow { tick, pid, delta });
            }
            if p.seg >= p.segments.len() {
                events.push(MachineEvent::Finished { pid });
            }
        }
        for e in &events {
            if let MachineEvent::Finished { pid } = e {
                self.finish(*pid);
            }
        }
        // Attackers stop once nothing they target is alive.
        let ended: Vec<Pid> = self
            .processes
            .iter()
            .filter(|a| a.is_alive() && a.is_spinning_attacker())
            .filter(|a| !self.processes.iter().any(|v| v.pid != a.pid && v.is_alive() && a.targets(v)))
            .map(|a| a.pid)
            .collect();
        for pid in ended {
            self.finish(pid);
            events.push(MachineEvent::Finished { pid });
        }
        if let Some(t) = &mut self.trace {
            t.extend(rows);
        }
        self.tick += 1;
        events
    }

    fn finish(&mut self, pid: Pid) {
        self.release_core(pid);
        let tick = self.tick;
        let p = &mut self.processes[pid];
        p.status = Status::Finished;
        p.finished_at = Some(tick + 1);
        p.open_nest = None;
    }

    pub fn write_counter_trace<W: Write>(&self, out: W) -> csv::Result<()> {
        write_counter_rows(self.counter_trace(), out)
    }
}

/// Writes per-tick counter deltas as `tick,pid,misses_base,misses_contention,misses_attack,instructions`.
pub fn write_counter_rows<W: Write>(rows: &[CounterRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tick", "pid", "misses_base", "misses_contention", "misses_attack", "instructions"])?;
    for r in rows {
        w.write_record([
            r.tick.to_string(),
            r.pid.to_string(),
            format!("{:.3}", r.delta.misses_base),
            format!("{:.3}", r.delta.misses_contention),
            format!("{:.3}", r.delta.misses_attack),
            format!("{:.3}", r.delta.instructions),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(total - capacity) / capacity` when positive, else 0.
pub fn overflow_fraction(total: f64, capacity: f64) -> f64 {
    if total <= capacity {
        0.0
    } else {
        (total - capacity) / capacity
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(id: &str, instructions: f64, misses: f64) -> Segment {
        Segment {
            instructions,
            misses,
            region: Some(RegionRun {
                loop_id: LoopId::new(id),
                visible: vec![Some(1.0)],
                realized: vec![1.0],
            }),
        }
    }

    fn plain(instructions: f64) -> Segment {
        Segment {
            instructions,
            misses: 0.0,
            region: None,
        }
    }

    fn world() -> World {
        World::new(MachineConfig::default()).unwrap()
    }

    /// Runs with every Enter admitted immediately.
    fn run(w: &mut World, max: u64) -> Vec<(u64, MachineEvent)> {
        let mut log = Vec::new();
        for _ in 0..max {
            let t = w.tick;
            for e in w.step() {
                if let MachineEvent::Enter { pid, .. } = &e {
                    w.admit(*pid, None);
                }
                log.push((t, e));
            }
            if w.processes.iter().all(|p| !p.is_alive()) {
                break;
            }
        }
        log
    }

    #[test]
    fn empty_machine_only_advances_the_clock() {
        let mut w = world();
        assert!(w.step().is_empty());
        assert_eq!(w.tick, 1);
        assert!(w.processes.is_empty());
    }

    #[test]
    fn lone_process_accrues_ground_truth_misses() {
        let mut w = world();
        let pid = w.spawn("p", vec![], vec![plain(1.0e6), region("n", 1.0e7, 5.0e4), plain(3.0e6)], None);
        w.place(pid, 0).unwrap();
        let log = run(&mut w, 100);
        let p = w.process(pid).unwrap();
        assert!((p.counters.misses_base - 5.0e4).abs() < 1e-6);
        assert_eq!(p.counters.misses_contention, 0.0);
        assert_eq!(p.counters.misses_attack, 0.0);
        assert!((p.counters.instructions - 1.4e7).abs() < 1e-3);
        let kinds: Vec<_> = log
            .iter()
            .map(|(_, e)| match e {
                MachineEvent::Enter { .. } => "enter",
                MachineEvent::Complete { .. } => "complete",
                MachineEvent::Finished { .. } => "finished",
            })
            .collect();
        assert_eq!(kinds, vec!["enter", "complete", "finished"]);
        assert_eq!(p.status, Status::Finished);
    }

    #[test]
    fn overflow_examples() {
        assert_eq!(overflow_fraction(100.0, 100.0), 0.0);
        assert!((overflow_fraction(120.0, 100.0) * 100.0 - 20.0).abs() < 1e-12);
        assert_eq!(overflow_fraction(10.0, 100.0), 0.0);
        let mut w = world();
        let cap = w.config.llc_capacity;
        let a = w.spawn("a", vec![], vec![region("a", 1e9, cap * 0.6)], None);
        let b = w.spawn("b", vec![], vec![region("b", 1e9, cap * 0.6)], None);
        w.place(a, 0).unwrap();
        w.place(b, 0).unwrap();
        w.admit(a, None);
        w.admit(b, None);
        assert!((w.overflow(0) - 0.2).abs() < 1e-12);
        let extra = w.contention_misses(0, &[(a, 100.0)]);
        assert!((extra[0].1 - 20.0).abs() < 1e-9);
        w.deschedule(b, Status::Descheduled);
        assert_eq!(w.overflow(0), 0.0);
    }

    #[test]
    fn flush_attack_multiplies_nest_misses() {
        let rate = 1.0e-3; // misses per instruction
        let ipt = MachineConfig::default().instructions_per_tick;
        let baseline_per_tick = rate * ipt;
        let mut w = world();
        let v = w.spawn("v", vec!["libcrypto".into()], vec![region("n", 500.0 * ipt, 500.0 * ipt * rate)], None);
        let a = w.spawn_attacker(
            AttackerSpec {
                technique: Technique::FlushReload,
                induction_rate: 5.0 * baseline_per_tick,
                ramp_ticks: 10,
                target: AttackTarget::Library("libcrypto".into()),
                footprint: 10.0,
            },
            20.0,
        );
        w.place(v, 0).unwrap();
        w.place(a, 0).unwrap();
        run(&mut w, 100_000);
        let p = w.process(v).unwrap();
        assert!(p.counters.misses() >= 5.0 * p.counters.misses_base, "{:?}", p.counters);
        assert!(p.wall_ticks().unwrap() > 500);
        // attacker exits with its target
        assert_eq!(w.process(a).unwrap().status, Status::Finished);
    }

    #[test]
    fn cross_socket_attacker_has_no_effect() {
        let mut w = world();
        let v = w.spawn("v", vec!["lib".into()], vec![region("n", 2.0e8, 2.0e5)], None);
        let a = w.spawn_attacker(
            AttackerSpec {
                technique: Technique::FlushFlush,
                induction_rate: 1.0e5,
                ramp_ticks: 1,
                target: AttackTarget::Library("lib".into()),
                footprint: 10.0,
            },
            20.0,
        );
        w.place(v, 0).unwrap();
        w.place(a, 1).unwrap();
        run(&mut w, 10_000);
        assert_eq!(w.process(v).unwrap().counters.misses_attack, 0.0);
    }

    #[test]
    fn mpki_reads() {
        let mut w = world();
        let pid = w.spawn("p", vec![], vec![region("n", 1.0e8, 5.0e4)], None);
        assert_eq!(w.read_mpki(pid, 10), Err(MachineError::UndefinedMpki(pid)));
        w.place(pid, 0).unwrap();
        run(&mut w, 12);
        // 5e4 misses over 1e8 instructions
        assert!((w.read_mpki(pid, 10).unwrap() - 0.5).abs() < 1e-9);
        w.deschedule(pid, Status::Descheduled);
        for _ in 0..10 {
            w.step();
        }
        assert_eq!(w.read_mpki(pid, 10), Err(MachineError::UndefinedMpki(pid)));
    }

    #[test]
    fn attack_raises_mpki() {
        let make = |attacked: bool| {
            let mut w = world();
            let v = w.spawn("v", vec!["l".into()], vec![region("n", 1.0e9, 1.0e6)], None);
            w.place(v, 0).unwrap();
            if attacked {
                let a = w.spawn_attacker(
                    AttackerSpec {
                        technique: Technique::PrimeProbe,
                        induction_rate: 2000.0,
                        ramp_ticks: 5,
                        target: AttackTarget::Process(v),
                        footprint: 1.0,
                    },
                    20.0,
                );
                w.place(a, 0).unwrap();
            }
            run(&mut w, 30);
            w.read_mpki(v, 10).unwrap()
        };
        assert!(make(true) > make(false));
    }

    #[test]
    fn deterministic_counter_trace() {
        let make = || {
            let mut w = world();
            w.enable_counter_trace();
            let v = w.spawn("v", vec!["l".into()], vec![plain(5e6), region("n", 4.0e7, 4.0e4)], None);
            let a = w.spawn_attacker(
                AttackerSpec {
                    technique: Technique::FlushReload,
                    induction_rate: 500.0,
                    ramp_ticks: 3,
                    target: AttackTarget::Process(v),
                    footprint: 1.0,
                },
                15.0,
            );
            w.place(v, 0).unwrap();
            w.place(a, 0).unwrap();
            run(&mut w, 1000);
            let mut buf = Vec::new();
            w.write_counter_trace(&mut buf).unwrap();
            buf
        };
        let first = make();
        assert!(String::from_utf8_lossy(&first).starts_with("tick,pid,misses_base,misses_contention,misses_attack,instructions\n"));
        assert_eq!(first, make());
    }

    proptest::proptest! {
        #[test]
        fn counters_conserve_and_stay_non_negative(
            fps in proptest::collection::vec(1.0e5f64..3.0e6, 1..6),
            rate in 0.0f64..5000.0,
        ) {
            let mut w = world();
            let pids: Vec<Pid> = fps
                .iter()
                .enumerate()
                .map(|(i, f)| w.spawn("p", vec!["l".into()], vec![region(&format!("r{i}"), 4.0e7, *f)], None))
                .collect();
            let a = w.spawn_attacker(
                AttackerSpec {
                    technique: Technique::FlushReload,
                    induction_rate: rate + 1.0,
                    ramp_ticks: 4,
                    target: AttackTarget::Library("l".into()),
                    footprint: 5.0,
                },
                10.0,
            );
            for &p in &pids {
                w.place(p, 0).unwrap();
            }
            w.place(a, 0).unwrap();
            w.enable_counter_trace();
            run(&mut w, 5000);
            for &p in &pids {
                let c = w.process(p).unwrap().counters;
                proptest::prop_assert!(c.misses_base >= 0.0 && c.misses_contention >= 0.0 && c.misses_attack >= 0.0);
                let summed: f64 = w.counter_trace().iter().filter(|r| r.pid == p).map(|r| r.delta.misses()).sum();
                proptest::prop_assert!((summed - c.misses()).abs() <= 1e-6 * c.misses().max(1.0));
            }
        }
    }
}
