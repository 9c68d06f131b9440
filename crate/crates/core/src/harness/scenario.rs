//! Scenario construction and the closed simulation loop.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::catalog::{catalog, Catalog, ProgramSpec, Regime, Role};
use super::config::HarnessConfig;
use super::report::{EpisodeRow, ProcessRow, ScenarioReport};
use super::train::{accuracy, draw_params, train_catalog, TrainedCatalog};
use super::HarnessError;
use crate::beacon::{compile_segments, validate_events, BeaconEvent, Phase, Segment};
use crate::machine::{AttackTarget, AttackerSpec, CounterRow, MachineConfig, MachineEvent, Pid, Technique, World};
use crate::model::ModelSet;
use crate::scheduler::{tick, Action, MitigationConfig, ScheduleEvent, Scheduler, SchedulerKind};

/// Identifies one cell of the matrix.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScenarioKey {
    pub regime: Regime,
    pub stress: bool,
    pub scheduler: SchedulerKind,
    pub attack: Option<Technique>,
    pub processes: usize,
    pub seed: u64,
}

impl ScenarioKey {
    pub fn name(&self) -> String {
        format!(
            "{}{}-{}-{}-n{:02}-s{:04}",
            self.regime.name(),
            if self.stress { "-stress" } else { "" },
            self.scheduler.name(),
            self.attack.map_or("none", Technique::name),
            self.processes,
            self.seed
        )
    }

    pub fn twin(&self, scheduler: SchedulerKind) -> ScenarioKey {
        ScenarioKey { scheduler, ..self.clone() }
    }

    /// Seed for everything that must be identical across schedulers.
    fn world_seed(&self) -> u64 {
        let mut h = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= (self.processes as u64) << 32;
        h ^= match self.attack {
            None => 0,
            Some(t) => 1 + t as u64,
        } << 48;
        h ^= (self.regime as u64) << 56 | (self.stress as u64) << 60;
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcessPlan {
    pub program: String,
    pub role: Role,
    pub params: BTreeMap<String, u64>,
    pub arrival: u64,
    pub pinned: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackPlan {
    pub technique: Technique,
    pub arrival: u64,
    pub pinned: Option<usize>,
    pub multiple: f64,
    pub ramp_ticks: u64,
    pub footprint: f64,
    pub own_mpki: f64,
    /// Flush techniques share a library with the victim; prime+probe aims at the process.
    pub shared_library: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub key: ScenarioKey,
    pub machine: MachineConfig,
    pub mitigation: MitigationConfig,
    /// Processes in pid order; the victim is pid 0.
    pub processes: Vec<ProcessPlan>,
    pub attacker: Option<AttackPlan>,
    pub max_ticks: u64,
}

/// A trained catalog plus the capacity derived from it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub catalog: Catalog,
    pub trained: TrainedCatalog,
    /// Mean predicted upper-bound footprint of a region across the suite.
    pub mean_region: f64,
    pub capacity: f64,
}

impl Prepared {
    pub fn models(&self, program: &str) -> Option<Arc<ModelSet>> {
        self.trained.sets.get(program).cloned()
    }
}

/// Trains the configured suite and sizes the cache from it.
pub fn prepare(cfg: &HarnessConfig) -> Result<Prepared, HarnessError> {
    let cat = catalog(cfg.regime);
    let trained = train_catalog(&cat, cfg.training_seed)?;
    prepare_with(cfg, cat, trained)
}

pub fn prepare_with(cfg: &HarnessConfig, cat: Catalog, trained: TrainedCatalog) -> Result<Prepared, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training_seed);
    let mut per_program = Vec::new();
    for spec in cat.programs.iter().filter(|p| p.role != Role::Stress) {
        let set = trained
            .sets
            .get(spec.name())
            .ok_or_else(|| HarnessError::Config(format!("no models for {}", spec.name())))?;
        let segs = compile_segments(&spec.instrumented, &spec.mid_params(), &mut rng)?;
        let uppers: Vec<f64> = segs
            .iter()
            .filter_map(|s| s.region.as_ref())
            .filter_map(|r| set.get(&r.loop_id)?.predict_upper_visible(&r.visible).ok())
            .collect();
        if !uppers.is_empty() {
            per_program.push(uppers.iter().sum::<f64>() / uppers.len() as f64);
        }
    }
    let mean_region = per_program.iter().sum::<f64>() / per_program.len().max(1) as f64;
    let capacity = if cfg.capacity_regions > 0.0 {
        cfg.capacity_regions * mean_region
    } else {
        cfg.machine.llc_capacity
    };
    Ok(Prepared {
        catalog: cat,
        trained,
        mean_region,
        capacity,
    })
}

fn pick<'a, R: Rng + ?Sized>(pool: &[&'a ProgramSpec], rng: &mut R) -> &'a ProgramSpec {
    pool[rng.random_range(0..pool.len())]
}

/// Builds the scenario for `key`. Everything except the scheduler comes from the key's seed.
pub fn build_scenario(cfg: &HarnessConfig, prep: &Prepared, key: &ScenarioKey) -> Result<Scenario, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(key.world_seed());
    let victims = prep.catalog.by_role(if key.stress { Role::Stress } else { Role::Victim });
    let corunners = prep.catalog.by_role(Role::CoRunner);
    if victims.is_empty() || corunners.is_empty() {
        return Err(HarnessError::Config("catalog lacks victims or co-runners".into()));
    }
    let victim = pick(&victims, &mut rng);
    let mut processes = vec![ProcessPlan {
        program: victim.name().to_string(),
        role: victim.role,
        params: draw_params(victim, &mut rng),
        arrival: 0,
        pinned: Some(0),
    }];
    let others = key.processes - 1 - usize::from(key.attack.is_some());
    let mut co: Vec<ProcessPlan> = (0..others)
        .map(|_| {
            let spec = pick(&corunners, &mut rng);
            ProcessPlan {
                program: spec.name().to_string(),
                role: Role::CoRunner,
                params: draw_params(spec, &mut rng),
                arrival: rng.random_range(0..=cfg.arrival_jitter),
                pinned: None,
            }
        })
        .collect();
    co.sort_by_key(|p| p.arrival);
    processes.extend(co);
    let attacker = key.attack.map(|t| AttackPlan {
        technique: t,
        arrival: cfg.attack.arrival,
        pinned: Some(0),
        multiple: cfg.attack.multiple(t),
        ramp_ticks: cfg.attack.ramp(t),
        footprint: cfg.attack.footprint_share * prep.mean_region,
        own_mpki: cfg.attack.mpki(t),
        shared_library: match t {
            Technique::PrimeProbe => None,
            _ => victim.program().libraries.last().cloned(),
        },
    });
    let mut machine = cfg.machine.clone();
    machine.llc_capacity = prep.capacity;
    machine.monitoring_tax = match key.scheduler {
        SchedulerKind::Biscuit => cfg.monitoring_tax,
        SchedulerKind::Baseline => 0.0,
    };
    Ok(Scenario {
        key: key.clone(),
        machine,
        mitigation: cfg.mitigation.clone(),
        processes,
        attacker,
        max_ticks: cfg.max_ticks,
    })
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: ScenarioReport,
    pub schedule: Vec<ScheduleEvent>,
    pub beacons: Vec<BeaconEvent>,
    pub counters: Vec<CounterRow>,
}

enum Arrival<'a> {
    Program(usize, &'a ProcessPlan),
    Attacker(&'a AttackPlan),
}

/// Runs one scenario to completion.
///
/// `baseline_victim_end` is the tick the victim finished in the baseline twin;
/// it is the full attack duration used for detection efficiency. When absent
/// for an attacked run under the footprint-aware scheduler, the twin is run here.
pub fn run_scenario(prep: &Prepared, sc: &Scenario, baseline_victim_end: Option<u64>, trace: bool) -> Result<RunOutput, HarnessError> {
    let key = &sc.key;
    let mut world = World::new(sc.machine.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    if trace {
        world.enable_counter_trace();
    }
    let mut sched = Scheduler::new(key.scheduler, sc.mitigation.clone(), sc.machine.sockets, prep.capacity);

    // Segments depend only on the seed and the plan index, never on the scheduler.
    let mut compiled: Vec<Vec<Segment>> = Vec::new();
    for (i, plan) in sc.processes.iter().enumerate() {
        let spec = prep
            .catalog
            .get(&plan.program)
            .ok_or_else(|| HarnessError::Config(format!("unknown program {}", plan.program)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(key.world_seed() ^ (0x5eed_0000 + i as u64));
        compiled.push(compile_segments(&spec.instrumented, &plan.params, &mut rng)?);
    }

    let mut arrivals: Vec<(u64, usize, Arrival)> = sc
        .processes
        .iter()
        .enumerate()
        .map(|(i, p)| (p.arrival, i, Arrival::Program(i, p)))
        .collect();
    if let Some(a) = &sc.attacker {
        arrivals.push((a.arrival, usize::MAX, Arrival::Attacker(a)));
    }
    arrivals.sort_by_key(|(t, i, _)| (*t, *i));

    let victim_plan = 0;
    let victim_rho = {
        let (m, n) = compiled[victim_plan]
            .iter()
            .fold((0.0, 0.0), |(m, n), s| (m + s.misses, n + s.instructions));
        if n > 0.0 { m / n } else { 0.0 }
    };

    let mut plan_pid: Vec<Option<Pid>> = vec![None; sc.processes.len()];
    let mut attacker_pid = None;
    let mut role_of: BTreeMap<Pid, Role> = BTreeMap::new();
    let mut program_models: BTreeMap<Pid, Option<Arc<ModelSet>>> = BTreeMap::new();
    let mut beacons = Vec::new();
    let mut next = 0;
    let mut timed_out = false;
    loop {
        let mut batch = Vec::new();
        while next < arrivals.len() && arrivals[next].0 <= world.tick {
            match &arrivals[next].2 {
                Arrival::Program(i, plan) => {
                    let spec = prep.catalog.get(&plan.program).expect("checked above");
                    let pid = world.spawn(&plan.program, spec.program().libraries.clone(), compiled[*i].clone(), None);
                    plan_pid[*i] = Some(pid);
                    role_of.insert(pid, plan.role);
                    let models = prep.models(&plan.program);
                    program_models.insert(pid, models.clone());
                    batch.push((pid, models, plan.pinned));
                }
                Arrival::Attacker(a) => {
                    let victim = plan_pid[victim_plan].expect("victim arrives first");
                    let target = match &a.shared_library {
                        Some(lib) => AttackTarget::Library(lib.clone()),
                        None => AttackTarget::Process(victim),
                    };
                    let spec = AttackerSpec {
                        technique: a.technique,
                        induction_rate: a.multiple * victim_rho * sc.machine.instructions_per_tick,
                        ramp_ticks: a.ramp_ticks,
                        target,
                        footprint: a.footprint,
                    };
                    let pid = world.spawn_attacker(spec, a.own_mpki);
                    attacker_pid = Some(pid);
                    batch.push((pid, None, a.pinned));
                }
            }
            next += 1;
        }
        if !batch.is_empty() {
            sched.on_arrival(&mut world, &batch);
        }
        let all_arrived = next >= arrivals.len();
        if all_arrived && world.processes.iter().all(|p| !p.is_alive()) {
            break;
        }
        if world.tick >= sc.max_ticks {
            timed_out = true;
            break;
        }
        let events = tick(&mut world, &mut sched);
        let t = world.tick - 1;
        for e in events {
            match e {
                MachineEvent::Enter { pid, run } => {
                    let upper = program_models
                        .get(&pid)
                        .and_then(|m| m.as_ref())
                        .and_then(|m| m.get(&run.loop_id))
                        .and_then(|m| m.predict_upper_visible(&run.visible).ok());
                    beacons.push(BeaconEvent {
                        tick: t,
                        pid,
                        loop_id: run.loop_id,
                        phase: Phase::Enter,
                        predicted_upper: upper,
                    });
                }
                MachineEvent::Complete { pid, loop_id } => beacons.push(BeaconEvent {
                    tick: t,
                    pid,
                    loop_id,
                    phase: Phase::Complete,
                    predicted_upper: None,
                }),
                MachineEvent::Finished { .. } => {}
            }
        }
    }

    let victim = plan_pid[victim_plan].expect("victim spawned");
    let victim_end = world.processes[victim].finished_at;
    let full_end = match (key.scheduler, &sc.attacker, baseline_victim_end) {
        (_, None, _) => None,
        (SchedulerKind::Baseline, Some(_), _) => victim_end,
        (SchedulerKind::Biscuit, Some(_), Some(b)) => Some(b),
        (SchedulerKind::Biscuit, Some(_), None) => {
            let twin = Scenario {
                key: key.twin(SchedulerKind::Baseline),
                machine: MachineConfig {
                    monitoring_tax: 0.0,
                    ..sc.machine.clone()
                },
                ..sc.clone()
            };
            run_scenario(prep, &twin, None, false)?.report.victim_end
        }
    };

    // Model accuracy over every region any process executes.
    let mut region_count = 0;
    let mut accuracy_sum = 0.0;
    let mut covered = 0;
    for (i, plan) in sc.processes.iter().enumerate() {
        let Some(set) = prep.models(&plan.program) else { continue };
        for s in &compiled[i] {
            let Some(r) = &s.region else { continue };
            let Some(m) = set.get(&r.loop_id) else { continue };
            let (Ok(p), Ok(u)) = (m.predict_visible(&r.visible), m.predict_upper_visible(&r.visible)) else {
                continue;
            };
            region_count += 1;
            accuracy_sum += accuracy(p, s.misses);
            covered += usize::from(s.misses <= u);
        }
    }

    let flagged = sched.flagged();
    let attack_start = sc.attacker.as_ref().map(|a| a.arrival);
    let thwarted_at = attacker_pid.and_then(|a| {
        sched
            .log()
            .iter()
            .find(|e| e.pid == a && e.action == Action::Flag)
            .map(|e| e.tick)
    });
    let false_flags: Vec<Pid> = flagged.iter().copied().filter(|p| Some(*p) != attacker_pid).collect();
    let (tp, fp, fn_, tn) = match attacker_pid {
        Some(a) => {
            let hit = flagged.contains(&a);
            (u32::from(hit), u32::from(!false_flags.is_empty()), u32::from(!hit), 0)
        }
        None => (0, u32::from(!false_flags.is_empty()), 0, u32::from(false_flags.is_empty())),
    };
    let detection_efficiency = if attack_start.is_some() || !flagged.is_empty() {
        Some(match (key.scheduler, attack_start, thwarted_at, full_end) {
            (SchedulerKind::Biscuit, Some(start), Some(th), Some(end)) => {
                super::metrics::detection_efficiency(start, th, end.saturating_sub(start))
            }
            _ => 0.0,
        })
    } else {
        None
    };
    let exonerated = false_flags
        .iter()
        .filter(|&&p| world.processes[p].finished_at.is_some())
        .count();

    let processes = world
        .processes
        .iter()
        .map(|p| ProcessRow {
            pid: p.pid,
            program: p.program.clone(),
            role: match (Some(p.pid) == attacker_pid, role_of.get(&p.pid)) {
                (true, _) => "attacker".to_string(),
                (_, Some(Role::CoRunner)) => "corunner".to_string(),
                _ => "victim".to_string(),
            },
            arrival: p.arrival,
            finished_at: p.finished_at,
            instructions: p.counters.instructions,
            misses: p.counters.misses(),
            misses_attack: p.counters.misses_attack,
        })
        .collect();
    let episodes = sched
        .episodes()
        .iter()
        .map(|e| EpisodeRow {
            id: e.id,
            victim: e.victim,
            socket: e.socket,
            suspects: e.initial_suspects,
            halving_probes: e.halving_probes,
            linear_probes: e.linear_probes,
            flagged: e.flagged,
            started: e.started,
            ended: e.ended,
        })
        .collect();

    let report = ScenarioReport {
        name: key.name(),
        regime: key.regime,
        stress: key.stress,
        scheduler: key.scheduler,
        technique: key.attack,
        process_count: key.processes,
        seed: key.seed,
        capacity: prep.capacity,
        k: prep.trained.k,
        victim,
        attacker: attacker_pid,
        flagged,
        tp,
        fp,
        fn_,
        tn,
        exonerated,
        attack_start,
        thwarted_at,
        full_end,
        detection_efficiency,
        victim_end,
        end_tick: world.tick,
        timed_out,
        alarms: sched.alarms().len(),
        region_count,
        accuracy_sum,
        covered,
        capacity_violations: sched.violations().len(),
        protocol_errors: sched.protocol_errors().len(),
        trace_valid: validate_events(&beacons).is_ok(),
        processes,
        episodes,
    };
    Ok(RunOutput {
        report,
        schedule: sched.log().to_vec(),
        beacons,
        counters: world.counter_trace().to_vec(),
    })
}
