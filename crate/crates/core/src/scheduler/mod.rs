//! Footprint-aware placement, miss monitoring and attacker mitigation, plus a
//! footprint-blind round-robin baseline.
//!
//! The footprint-aware scheduler keeps a per-socket ledger of the predicted
//! upper-bound misses of every open loop nest and only lets a nest start where
//! it fits. A running nest whose observed misses exceed its prediction raises
//! an alarm; the scheduler then searches the victim's socket for the process
//! whose removal lowers the victim's MPKI, halving the suspect set while it is
//! larger than eight and scanning the rest one at a time.

mod ledger;

pub use ledger::SocketLedger;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::beacon::RegionRun;
use crate::machine::{MachineEvent, Pid, Status, World};
use crate::model::ModelSet;
use crate::workload::LoopId;

const EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    Biscuit,
    Baseline,
}

impl SchedulerKind {
    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::Biscuit => "biscuit",
            SchedulerKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "biscuit" => Some(SchedulerKind::Biscuit),
            "baseline" => Some(SchedulerKind::Baseline),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationConfig {
    /// Relative MPKI drop that counts as "the attacker was removed".
    pub drop_threshold: f64,
    pub halving_window: u64,
    pub linear_window: u64,
    /// Suspect count above which the set is halved.
    pub linear_limit: usize,
    /// Extra ticks added once when a window saw no instructions.
    pub widen_ticks: u64,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig {
            drop_threshold: 0.15,
            halving_window: 10,
            linear_window: 2,
            linear_limit: 8,
            widen_ticks: 2,
        }
    }
}

/// A newly arrived process: pid, its models if instrumented, and an optional socket pin.
pub type Arrival = (Pid, Option<Arc<ModelSet>>, Option<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Place,
    Migrate,
    Swap,
    Deschedule,
    Resume,
    Flag,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Action::Place => "place",
            Action::Migrate => "migrate",
            Action::Swap => "swap",
            Action::Deschedule => "deschedule",
            Action::Resume => "resume",
            Action::Flag => "flag",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub tick: u64,
    pub pid: Pid,
    pub action: Action,
    pub socket: Option<usize>,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MitigationPhase {
    BinaryHalving,
    LinearScan,
    Resolved,
}

/// Summary of one mitigation episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub id: usize,
    pub victim: Pid,
    pub socket: usize,
    pub initial_suspects: usize,
    pub halving_probes: usize,
    pub linear_probes: usize,
    pub flagged: Option<Pid>,
    pub started: u64,
    pub ended: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alarm {
    pub tick: u64,
    pub pid: Pid,
    pub loop_id: LoopId,
    pub observed: f64,
    pub predicted_upper: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MitigationState {
    pub victim: Pid,
    pub suspects: Vec<Pid>,
    pub phase: MitigationPhase,
    pub probes_taken: usize,
    pub flagged: Option<Pid>,
}

#[derive(Clone, Debug, PartialEq)]
enum Probe {
    HalvingBefore { until: u64, window: u64, retried: bool },
    HalvingAfter { prev: Option<f64>, set_a: Vec<Pid>, until: u64, window: u64, retried: bool },
    LinearBefore { idx: usize, until: u64, window: u64, retried: bool },
    LinearAfter { idx: usize, prev: Option<f64>, until: u64, window: u64, retried: bool },
}

#[derive(Clone, Debug)]
struct Episode {
    id: usize,
    socket: usize,
    state: MitigationState,
    probe: Probe,
    /// Suspect MPKI measured while everyone was running, for linear-scan order.
    suspect_mpki: BTreeMap<Pid, f64>,
    record: usize,
}

#[derive(Clone, Debug, Default)]
struct ProcInfo {
    models: Option<Arc<ModelSet>>,
    pinned: Option<usize>,
    /// Footprint and upper bound of the region awaiting admission.
    pending: Option<(f64, Option<f64>)>,
    /// Footprint of the admitted open region (kept while paused or flagged).
    open: Option<f64>,
    /// Never emitted a beacon.
    silent: bool,
    latched: bool,
    exempt: bool,
    flagged: bool,
    placed_once: bool,
}

pub struct Scheduler {
    pub kind: SchedulerKind,
    pub mitigation: MitigationConfig,
    ledgers: Vec<SocketLedger>,
    procs: BTreeMap<Pid, ProcInfo>,
    queue: VecDeque<Pid>,
    episode: Option<Episode>,
    alarm_queue: VecDeque<Pid>,
    log: Vec<ScheduleEvent>,
    episodes: Vec<EpisodeRecord>,
    alarms: Vec<Alarm>,
    violations: Vec<String>,
    protocol_errors: Vec<String>,
    rr_next: usize,
    /// Flagged processes currently resumed because the machine went idle.
    resumed: Vec<Pid>,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, mitigation: MitigationConfig, sockets: usize, capacity: f64) -> Self {
        Scheduler {
            kind,
            mitigation,
            ledgers: (0..sockets).map(|s| SocketLedger::new(s, capacity)).collect(),
            procs: BTreeMap::new(),
            queue: VecDeque::new(),
            episode: None,
            alarm_queue: VecDeque::new(),
            log: Vec::new(),
            episodes: Vec::new(),
            alarms: Vec::new(),
            violations: Vec::new(),
            protocol_errors: Vec::new(),
            rr_next: 0,
            resumed: Vec::new(),
        }
    }

    pub fn log(&self) -> &[ScheduleEvent] {
        &self.log
    }

    pub fn episodes(&self) -> &[EpisodeRecord] {
        &self.episodes
    }

    pub fn alarms(&self) -> &[Alarm] {
        &self.alarms
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn protocol_errors(&self) -> &[String] {
        &self.protocol_errors
    }

    pub fn ledger(&self, socket: usize) -> &SocketLedger {
        &self.ledgers[socket]
    }

    pub fn mitigation_state(&self) -> Option<&MitigationState> {
        self.episode.as_ref().map(|e| &e.state)
    }

    pub fn flagged(&self) -> Vec<Pid> {
        self.procs.iter().filter(|(_, i)| i.flagged).map(|(p, _)| *p).collect()
    }

    fn record(&mut self, world: &World, pid: Pid, action: Action, socket: Option<usize>, reason: impl Into<String>) {
        self.log.push(ScheduleEvent {
            tick: world.tick,
            pid,
            action,
            socket,
            reason: reason.into(),
        });
    }

    fn biscuit(&self) -> bool {
        self.kind == SchedulerKind::Biscuit
    }

    /// Registers processes that arrived this tick and places them.
    pub fn on_arrival(&mut self, world: &mut World, batch: &[Arrival]) {
        for (pid, models, pinned) in batch {
            self.procs.insert(
                *pid,
                ProcInfo {
                    models: models.clone(),
                    pinned: *pinned,
                    silent: true,
                    ..ProcInfo::default()
                },
            );
        }
        // Resumed flagged processes give way to new work.
        for pid in std::mem::take(&mut self.resumed) {
            if world.processes[pid].is_alive() {
                self.release_ledger(pid);
                world.deschedule(pid, Status::Quarantined);
                self.record(world, pid, Action::Deschedule, None, "quarantine");
            }
        }
        let pids: Vec<Pid> = batch.iter().map(|(p, _, _)| *p).collect();
        let sockets = world.config.sockets;
        for (i, &pid) in pids.iter().enumerate() {
            let info = &self.procs[&pid];
            let choice = if let Some(s) = info.pinned {
                world.free_core(s).map(|_| s)
            } else if self.biscuit() && i < sockets {
                // First of the batch on a distinct socket each.
                (0..sockets)
                    .map(|k| (i + k) % sockets)
                    .find(|&s| world.free_core(s).is_some())
            } else if self.biscuit() {
                self.roomiest_socket(world)
            } else {
                let s = (0..sockets)
                    .map(|k| (self.rr_next + k) % sockets)
                    .find(|&s| world.free_core(s).is_some());
                if let Some(s) = s {
                    self.rr_next = (s + 1) % sockets;
                }
                s
            };
            match choice {
                Some(s) => {
                    world.place(pid, s).expect("socket has a free core");
                    self.procs.get_mut(&pid).expect("registered").placed_once = true;
                    self.record(world, pid, Action::Place, Some(s), "arrival");
                }
                None => {
                    self.queue.push_back(pid);
                    self.record(world, pid, Action::Deschedule, None, "no-free-core");
                }
            }
        }
    }

    /// Socket with a free core and the most ledger headroom net of announced regions.
    fn roomiest_socket(&self, world: &World) -> Option<usize> {
        (0..world.config.sockets)
            .filter(|&s| world.free_core(s).is_some())
            .map(|s| {
                let pending: f64 = world
                    .residents(s)
                    .iter()
                    .filter_map(|p| self.procs.get(p).and_then(|i| i.pending).map(|(f, _)| f))
                    .sum();
                (s, self.ledgers[s].available - pending)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(s, _)| s)
    }

    pub fn on_events(&mut self, world: &mut World, events: &[MachineEvent]) {
        for e in events {
            match e {
                MachineEvent::Enter { pid, run } => self.on_enter(world, *pid, run),
                MachineEvent::Complete { pid, loop_id } => self.on_complete(world, *pid, loop_id),
                MachineEvent::Finished { pid } => self.on_finished(world, *pid),
            }
        }
        self.drain_queue(world);
    }

    fn footprint(&mut self, pid: Pid, run: &RegionRun) -> (f64, Option<f64>) {
        let info = self.procs.entry(pid).or_default();
        let Some(models) = &info.models else {
            return (0.0, None);
        };
        match models.get(&run.loop_id).map(|m| m.predict_upper_visible(&run.visible)) {
            Some(Ok(u)) => (u, Some(u)),
            other => {
                let msg = match other {
                    Some(Err(e)) => format!("pid {pid}: {}: {e}", run.loop_id),
                    _ => format!("pid {pid}: no model for {}", run.loop_id),
                };
                self.protocol_errors.push(msg);
                (0.0, None)
            }
        }
    }

    /// Placement decision for a nest that is about to start.
    pub fn on_enter(&mut self, world: &mut World, pid: Pid, run: &RegionRun) {
        let (fp, upper) = self.footprint(pid, run);
        let biscuit = self.biscuit();
        let info = self.procs.entry(pid).or_default();
        info.silent = false;
        info.latched = false;
        if !biscuit {
            world.admit(pid, None);
            return;
        }
        let Some(s) = world.processes[pid].socket() else {
            info.pending = Some((fp, upper));
            return;
        };
        let pinned = info.pinned;
        if fp <= self.ledgers[s].available + EPS {
            self.admit(world, pid, s, fp, upper);
            return;
        }
        if pinned.is_none() {
            for t in (0..world.config.sockets).filter(|&t| t != s) {
                if world.free_core(t).is_some() && fp <= self.ledgers[t].available + EPS {
                    world.place(pid, t).expect("free core");
                    self.record(world, pid, Action::Migrate, Some(t), "fits-elsewhere");
                    self.admit(world, pid, t, fp, upper);
                    return;
                }
            }
        } else if self.evict_for(world, s, fp) {
            self.admit(world, pid, s, fp, upper);
            return;
        }
        if pinned.is_none() {
            if let Some(q) = self.swap_partner(world, pid, s, fp) {
                let t = world.processes[q].socket().expect("placed");
                let fq = self.ledgers[t].remove(q);
                world.swap(pid, q);
                if let Some(fq) = fq {
                    self.ledgers[s].add(q, fq);
                }
                self.record(world, pid, Action::Swap, Some(t), format!("with={q}"));
                self.record(world, q, Action::Swap, Some(s), format!("with={pid}"));
                self.admit(world, pid, t, fp, upper);
                return;
            }
        }
        world.deschedule(pid, Status::Descheduled);
        let info = self.procs.get_mut(&pid).expect("registered");
        info.pending = Some((fp, upper));
        self.queue.push_back(pid);
        self.record(world, pid, Action::Deschedule, None, "insufficient-cache:cluster-stub");
    }

    /// Moves an unpinned co-resident off `s` so that `fp` fits there.
    fn evict_for(&mut self, world: &mut World, s: usize, fp: f64) -> bool {
        let in_episode = |p: Pid| {
            self.episode
                .as_ref()
                .is_some_and(|e| e.state.victim == p || e.state.suspects.contains(&p))
        };
        for q in world.running_on(s) {
            let info = &self.procs[&q];
            if info.pinned.is_some() || in_episode(q) {
                continue;
            }
            let fq = self.ledgers[s].residents.get(&q).copied().unwrap_or(0.0);
            if fp > self.ledgers[s].available + fq + EPS {
                continue;
            }
            let target = (0..world.config.sockets)
                .filter(|&t| t != s)
                .find(|&t| world.free_core(t).is_some() && fq <= self.ledgers[t].available + EPS);
            if let Some(t) = target {
                self.ledgers[s].remove(q);
                if fq > 0.0 {
                    self.ledgers[t].add(q, fq);
                }
                world.place(q, t).expect("free core");
                self.record(world, q, Action::Migrate, Some(t), "evicted");
                return true;
            }
        }
        false
    }

    fn swap_partner(&self, world: &World, pid: Pid, s: usize, fp: f64) -> Option<Pid> {
        for t in (0..world.config.sockets).filter(|&t| t != s) {
            for q in world.running_on(t) {
                if q == pid || self.procs.get(&q).is_some_and(|i| i.pinned.is_some()) {
                    continue;
                }
                let fq = self.ledgers[t].residents.get(&q).copied().unwrap_or(0.0);
                let s_ok = fq <= self.ledgers[s].available + EPS;
                let t_ok = fp <= self.ledgers[t].available + fq + EPS;
                if s_ok && t_ok {
                    return Some(q);
                }
            }
        }
        None
    }

    fn admit(&mut self, world: &mut World, pid: Pid, socket: usize, fp: f64, upper: Option<f64>) {
        if fp > 0.0 {
            self.ledgers[socket].add(pid, fp);
        }
        let info = self.procs.get_mut(&pid).expect("registered");
        info.pending = None;
        info.open = Some(fp);
        world.admit(pid, upper);
    }

    fn release_ledger(&mut self, pid: Pid) {
        for l in &mut self.ledgers {
            l.remove(pid);
        }
    }

    pub fn on_complete(&mut self, world: &mut World, pid: Pid, loop_id: &LoopId) {
        if !self.biscuit() {
            return;
        }
        let info = self.procs.entry(pid).or_default();
        if info.open.take().is_none() {
            self.protocol_errors
                .push(format!("tick {}: pid {pid}: complete of {loop_id} without enter", world.tick));
            return;
        }
        info.latched = false;
        self.release_ledger(pid);
    }

    fn on_finished(&mut self, world: &mut World, pid: Pid) {
        self.release_ledger(pid);
        if let Some(info) = self.procs.get_mut(&pid) {
            info.open = None;
            info.pending = None;
        }
        self.queue.retain(|&p| p != pid);
        self.resumed.retain(|&p| p != pid);
        if self.episode.as_ref().is_some_and(|ep| ep.state.victim == pid) {
            let ep = self.episode.take().expect("checked");
            self.episodes[ep.record].ended = Some(world.tick);
            // Whoever the open probe paused gets its core back.
            let paused = match &ep.probe {
                Probe::HalvingAfter { set_a, .. } => set_a.clone(),
                Probe::LinearAfter { idx, .. } => ep.state.suspects.get(*idx).copied().into_iter().collect(),
                _ => Vec::new(),
            };
            for p in paused {
                if !world.processes[p].is_alive() {
                    continue;
                }
                world.unpause(p);
                self.record(world, p, Action::Resume, Some(ep.socket), format!("abort:ep={}", ep.id));
            }
        }
    }

    /// Places queued processes wherever they now fit.
    fn drain_queue(&mut self, world: &mut World) {
        let mut remaining = VecDeque::new();
        while let Some(pid) = self.queue.pop_front() {
            if !world.processes[pid].is_alive() {
                continue;
            }
            let info = &self.procs[&pid];
            let (fp, upper) = info.pending.unwrap_or((0.0, None));
            let candidates: Vec<usize> = match info.pinned {
                Some(s) => vec![s],
                None => {
                    let mut v: Vec<usize> = (0..world.config.sockets).collect();
                    v.sort_by(|a, b| self.ledgers[*b].available.total_cmp(&self.ledgers[*a].available).then(a.cmp(b)));
                    v
                }
            };
            let fits = |s: usize| world.free_core(s).is_some() && (!self.biscuit() || fp <= self.ledgers[s].available + EPS);
            match candidates.into_iter().find(|&s| fits(s)) {
                Some(s) => {
                    world.place(pid, s).expect("free core");
                    let first = !self.procs[&pid].placed_once;
                    self.procs.get_mut(&pid).expect("registered").placed_once = true;
                    if first {
                        self.record(world, pid, Action::Place, Some(s), "queued");
                    } else {
                        self.record(world, pid, Action::Resume, Some(s), "cache-available");
                    }
                    if self.procs[&pid].pending.is_some() {
                        self.admit(world, pid, s, fp, upper);
                    }
                }
                None => remaining.push_back(pid),
            }
        }
        self.queue = remaining;
    }

    /// Per-tick monitoring, mitigation progress and invariant checks.
    pub fn on_tick(&mut self, world: &mut World) {
        if !self.biscuit() {
            self.drain_queue(world);
            return;
        }
        self.detect(world);
        self.advance_episode(world);
        while self.episode.is_none() {
            let Some(v) = self.alarm_queue.pop_front() else { break };
            if world.processes[v].status == Status::Running && !self.procs[&v].flagged {
                self.start_episode(world, v);
                self.advance_episode(world);
            }
        }
        self.reschedule_flagged(world);
        self.drain_queue(world);
        self.check_capacity(world);
    }

    /// Pids whose current nest has exceeded its predicted upper bound this tick.
    pub fn detect(&mut self, world: &World) -> Vec<Pid> {
        // Alarms on the socket under investigation are ignored, not latched, so
        // they can fire again once the episode ends.
        let busy_socket = self.episode.as_ref().map(|e| e.socket);
        let mut victims = Vec::new();
        for p in &world.processes {
            if p.status != Status::Running || (busy_socket.is_some() && p.socket() == busy_socket) {
                continue;
            }
            let Some(info) = self.procs.get_mut(&p.pid) else { continue };
            if info.exempt || info.latched || info.flagged {
                continue;
            }
            let Some(nest) = &p.open_nest else { continue };
            let Some(upper) = nest.predicted_upper else { continue };
            if p.misses_in_current_nest > upper {
                info.latched = true;
                self.alarms.push(Alarm {
                    tick: world.tick,
                    pid: p.pid,
                    loop_id: nest.loop_id.clone(),
                    observed: p.misses_in_current_nest,
                    predicted_upper: upper,
                });
                victims.push(p.pid);
                if !self.alarm_queue.contains(&p.pid) {
                    self.alarm_queue.push_back(p.pid);
                }
            }
        }
        victims
    }

    fn start_episode(&mut self, world: &mut World, victim: Pid) {
        let socket = world.processes[victim].socket().expect("running victim");
        let suspects: Vec<Pid> = world.running_on(socket).into_iter().filter(|&p| p != victim).collect();
        let id = self.episodes.len() + 1;
        self.episodes.push(EpisodeRecord {
            id,
            victim,
            socket,
            initial_suspects: suspects.len(),
            halving_probes: 0,
            linear_probes: 0,
            flagged: None,
            started: world.tick,
            ended: None,
        });
        let cfg = &self.mitigation;
        let (phase, probe) = if suspects.len() > cfg.linear_limit {
            (
                MitigationPhase::BinaryHalving,
                Probe::HalvingBefore {
                    until: world.tick + cfg.halving_window,
                    window: cfg.halving_window,
                    retried: false,
                },
            )
        } else {
            (
                MitigationPhase::LinearScan,
                Probe::LinearBefore {
                    idx: 0,
                    until: world.tick + cfg.linear_window,
                    window: cfg.linear_window,
                    retried: false,
                },
            )
        };
        let mut ep = Episode {
            id,
            socket,
            state: MitigationState {
                victim,
                suspects,
                phase,
                probes_taken: 0,
                flagged: None,
            },
            probe,
            suspect_mpki: BTreeMap::new(),
            record: id - 1,
        };
        if phase == MitigationPhase::LinearScan {
            order_suspects(world, &mut ep, self.mitigation.halving_window);
        }
        self.episode = Some(ep);
    }

    fn advance_episode(&mut self, world: &mut World) {
        loop {
            let Some(mut ep) = self.episode.take() else { return };
            let progressed = self.step_episode(world, &mut ep);
            if ep.state.phase == MitigationPhase::Resolved {
                self.episodes[ep.record].ended = Some(world.tick);
                return;
            }
            self.episode = Some(ep);
            if !progressed {
                return;
            }
        }
    }

    /// Reads the victim's MPKI once a window closes; `None` while still open.
    fn read_window(&self, world: &World, victim: Pid, until: &mut u64, window: &mut u64, retried: &mut bool) -> Option<Option<f64>> {
        if world.tick < *until {
            return None;
        }
        match world.read_mpki(victim, *window) {
            Ok(v) => Some(Some(v)),
            Err(_) if !*retried => {
                *retried = true;
                *until += self.mitigation.widen_ticks;
                *window += self.mitigation.widen_ticks;
                None
            }
            Err(_) => Some(None),
        }
    }

    fn dropped(&self, prev: Option<f64>, new: Option<f64>) -> bool {
        match (prev, new) {
            (Some(p), Some(n)) => n < p * (1.0 - self.mitigation.drop_threshold),
            _ => false,
        }
    }

    /// Returns whether the episode moved to a new probe state.
    fn step_episode(&mut self, world: &mut World, ep: &mut Episode) -> bool {
        let victim = ep.state.victim;
        let tick = world.tick;
        let cfg = self.mitigation.clone();
        if ep.state.phase == MitigationPhase::BinaryHalving {
            ep.state.suspects.retain(|&p| world.processes[p].is_alive());
        }
        match ep.probe.clone() {
            Probe::HalvingBefore {
                mut until,
                mut window,
                mut retried,
            } => {
                let Some(prev) = self.read_window(world, victim, &mut until, &mut window, &mut retried) else {
                    ep.probe = Probe::HalvingBefore { until, window, retried };
                    return false;
                };
                for &s in &ep.state.suspects {
                    let m = world.read_mpki(s, window).unwrap_or(-1.0);
                    ep.suspect_mpki.insert(s, m);
                }
                let half = ep.state.suspects.len() / 2;
                let set_a: Vec<Pid> = ep.state.suspects[..half].to_vec();
                let reason = format!("halving:ep={}:n={}", ep.id, self.episodes[ep.record].initial_suspects);
                for &p in &set_a {
                    world.pause(p);
                    self.record(world, p, Action::Deschedule, Some(ep.socket), reason.clone());
                }
                ep.probe = Probe::HalvingAfter {
                    prev,
                    set_a,
                    until: tick + cfg.halving_window,
                    window: cfg.halving_window,
                    retried: false,
                };
                true
            }
            Probe::HalvingAfter {
                prev,
                set_a,
                mut until,
                mut window,
                mut retried,
            } => {
                let Some(new) = self.read_window(world, victim, &mut until, &mut window, &mut retried) else {
                    ep.probe = Probe::HalvingAfter {
                        prev,
                        set_a,
                        until,
                        window,
                        retried,
                    };
                    return false;
                };
                for &p in &set_a {
                    world.unpause(p);
                    self.record(world, p, Action::Resume, Some(ep.socket), format!("halving:ep={}", ep.id));
                }
                ep.state.probes_taken += 1;
                self.episodes[ep.record].halving_probes += 1;
                let keep_a = self.dropped(prev, new);
                ep.state.suspects.retain(|p| set_a.contains(p) == keep_a);
                ep.state.suspects.retain(|&p| world.processes[p].is_alive());
                if ep.state.suspects.len() > cfg.linear_limit {
                    ep.probe = Probe::HalvingBefore {
                        until: tick + cfg.halving_window,
                        window: cfg.halving_window,
                        retried: false,
                    };
                } else {
                    ep.state.phase = MitigationPhase::LinearScan;
                    order_suspects(world, ep, cfg.halving_window);
                    ep.probe = Probe::LinearBefore {
                        idx: 0,
                        until: tick + cfg.linear_window,
                        window: cfg.linear_window,
                        retried: false,
                    };
                }
                true
            }
            Probe::LinearBefore {
                idx,
                mut until,
                mut window,
                mut retried,
            } => {
                if idx >= ep.state.suspects.len() {
                    self.flag(world, ep, victim, "victim-fallback");
                    return true;
                }
                if !world.processes[ep.state.suspects[idx]].is_alive() {
                    ep.probe = Probe::LinearBefore {
                        idx: idx + 1,
                        until,
                        window,
                        retried,
                    };
                    return true;
                }
                let Some(prev) = self.read_window(world, victim, &mut until, &mut window, &mut retried) else {
                    ep.probe = Probe::LinearBefore {
                        idx,
                        until,
                        window,
                        retried,
                    };
                    return false;
                };
                let s = ep.state.suspects[idx];
                world.pause(s);
                let n = self.episodes[ep.record].initial_suspects;
                self.record(world, s, Action::Deschedule, Some(ep.socket), format!("linear:ep={}:n={n}", ep.id));
                ep.probe = Probe::LinearAfter {
                    idx,
                    prev,
                    until: tick + cfg.linear_window,
                    window: cfg.linear_window,
                    retried: false,
                };
                true
            }
            Probe::LinearAfter {
                idx,
                prev,
                mut until,
                mut window,
                mut retried,
            } => {
                let Some(new) = self.read_window(world, victim, &mut until, &mut window, &mut retried) else {
                    ep.probe = Probe::LinearAfter {
                        idx,
                        prev,
                        until,
                        window,
                        retried,
                    };
                    return false;
                };
                ep.state.probes_taken += 1;
                self.episodes[ep.record].linear_probes += 1;
                let s = ep.state.suspects.get(idx).copied();
                if let Some(s) = s.filter(|&s| world.processes[s].is_alive()) {
                    if self.dropped(prev, new) {
                        self.flag(world, ep, s, "attacker");
                        return true;
                    }
                    world.unpause(s);
                    self.record(world, s, Action::Resume, Some(ep.socket), format!("linear:ep={}", ep.id));
                }
                let next = idx + 1;
                if next >= ep.state.suspects.len() {
                    self.flag(world, ep, victim, "victim-fallback");
                } else {
                    ep.probe = Probe::LinearBefore {
                        idx: next,
                        until: tick + cfg.linear_window,
                        window: cfg.linear_window,
                        retried: false,
                    };
                }
                true
            }
        }
    }

    fn flag(&mut self, world: &mut World, ep: &mut Episode, pid: Pid, why: &str) {
        self.release_ledger(pid);
        world.deschedule(pid, Status::Descheduled);
        let info = self.procs.entry(pid).or_default();
        info.flagged = true;
        let n = self.episodes[ep.record].initial_suspects;
        self.record(world, pid, Action::Flag, Some(ep.socket), format!("{why}:ep={}:n={n}", ep.id));
        ep.state.flagged = Some(pid);
        ep.state.phase = MitigationPhase::Resolved;
        self.episodes[ep.record].flagged = Some(pid);
    }

    /// Resumes flagged processes once nothing else needs the machine.
    fn reschedule_flagged(&mut self, world: &mut World) {
        let held: Vec<Pid> = self
            .procs
            .iter()
            .filter(|(p, i)| i.flagged && world.processes[**p].is_alive() && !self.resumed.contains(p))
            .map(|(p, _)| *p)
            .collect();
        if held.is_empty() || self.episode.is_some() || !self.queue.is_empty() {
            return;
        }
        let busy = world.processes.iter().any(|p| {
            let info = self.procs.get(&p.pid);
            p.is_alive() && !info.is_some_and(|i| i.flagged || i.silent)
        });
        if busy {
            return;
        }
        for pid in held {
            let pinned = self.procs[&pid].pinned;
            let fp = self.procs[&pid].open.unwrap_or(0.0);
            let fits = |s: usize| world.free_core(s).is_some() && fp <= self.ledgers[s].available + EPS;
            let socket = pinned
                .filter(|&s| fits(s))
                .or_else(|| (0..world.config.sockets).find(|&s| fits(s)));
            let Some(s) = socket else { continue };
            world.place(pid, s).expect("free core");
            let info = self.procs.get_mut(&pid).expect("registered");
            info.exempt = true;
            let open = info.open;
            if let Some(fp) = open.filter(|f| *f > 0.0) {
                self.ledgers[s].add(pid, fp);
            }
            self.resumed.push(pid);
            self.record(world, pid, Action::Resume, Some(s), "idle");
        }
    }

    fn check_capacity(&mut self, world: &World) {
        for l in &self.ledgers {
            let used: f64 = l.residents.values().sum();
            if used > l.capacity * (1.0 + 1e-9) + EPS || l.available < -EPS {
                self.violations.push(format!(
                    "tick {}: socket {} holds {used:.1} of capacity {:.1}",
                    world.tick, l.socket_id, l.capacity
                ));
            }
        }
    }

    pub fn write_log<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tick", "pid", "action", "socket", "reason"])?;
        for e in &self.log {
            w.write_record([
                e.tick.to_string(),
                e.pid.to_string(),
                e.action.to_string(),
                e.socket.map(|s| s.to_string()).unwrap_or_default(),
                e.reason.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Sorts suspects by descending MPKI as last measured with everyone running.
fn order_suspects(world: &World, ep: &mut Episode, window: u64) {
    for &s in &ep.state.suspects {
        ep.suspect_mpki
            .entry(s)
            .or_insert_with(|| world.read_mpki(s, window).unwrap_or(-1.0));
    }
    let mpki = &ep.suspect_mpki;
    ep.state
        .suspects
        .sort_by(|a, b| mpki[b].total_cmp(&mpki[a]).then(a.cmp(b)));
}


/// Advances the closed loop by one tick: machine step, beacon handling, monitoring.
pub fn tick(world: &mut World, sched: &mut Scheduler) -> Vec<MachineEvent> {
    let events = world.step();
    sched.on_events(world, &events);
    sched.on_tick(world);
    events
}
