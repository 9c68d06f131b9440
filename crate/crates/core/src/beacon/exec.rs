//! Expands an instrumented program into the sequence of work segments a process
//! executes, drawing data-dependent bounds, branch outcomes and miss noise.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Binomial, Distribution};

use super::{cycle_members, nest_callee, BeaconError, BeaconSite, Instrumented, SiteLocation, MAX_RECURSION_DEPTH};
use crate::workload::{ground_truth_misses, resolve_bounds, LoopId, LoopNest, Program, Stmt};

/// A beacon region as executed by one process.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionRun {
    pub loop_id: LoopId,
    /// Bounds the beacon can announce; `None` where the model must use its expectation.
    pub visible: Vec<Option<f64>>,
    /// Bounds that actually occurred (callee levels averaged over calls).
    pub realized: Vec<f64>,
}

/// A stretch of execution: either plain work or one beacon region.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub instructions: f64,
    pub misses: f64,
    pub region: Option<RegionRun>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionOutcome {
    pub instructions: f64,
    pub misses: f64,
    pub run: RegionRun,
}

#[derive(Default)]
struct Acc {
    instructions: f64,
    misses: f64,
}

#[derive(Clone, Copy, Default)]
struct LevelAcc {
    sum: f64,
    count: u64,
}

struct Ctx<'a, R: Rng + ?Sized> {
    prog: &'a Program,
    params: &'a BTreeMap<String, u64>,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized> Ctx<'_, R> {
    /// Runs a nest with every callee folded in; `levels` receives bounds from `offset` on.
    fn nest(
        &mut self,
        function: &str,
        nest: &LoopNest,
        levels: &mut [LevelAcc],
        offset: usize,
        acc: &mut Acc,
    ) -> Result<(), BeaconError> {
        let bounds = resolve_bounds(nest, self.params, self.rng)?;
        for (i, b) in bounds.iter().enumerate() {
            if let Some(l) = levels.get_mut(offset + i) {
                l.sum += *b as f64;
                l.count += 1;
            }
        }
        acc.misses += ground_truth_misses(nest, &bounds, self.rng)?;
        acc.instructions += nest.instructions(&bounds);
        let iterations: u64 = bounds.iter().product();
        let chained = nest_callee(self.prog, function, nest)?.map(|(c, _, _)| c.callee.clone());
        self.calls(&nest.innermost().body, iterations, chained.as_deref(), levels, offset + bounds.len(), acc)
    }

    /// Executes the calls of an innermost loop body `iterations` times.
    fn calls(
        &mut self,
        body: &[Stmt],
        iterations: u64,
        chained: Option<&str>,
        levels: &mut [LevelAcc],
        offset: usize,
        acc: &mut Acc,
    ) -> Result<(), BeaconError> {
        for s in body {
            match s {
                Stmt::Call(c) => self.repeat_call(&c.callee, iterations, chained, levels, offset, acc)?,
                Stmt::Cond(c) => {
                    let taken = if iterations == 0 || c.prob <= 0.0 {
                        0
                    } else if c.prob >= 1.0 {
                        iterations
                    } else {
                        Binomial::new(iterations, c.prob)
                            .expect("valid binomial")
                            .sample(self.rng)
                    };
                    // Work under the guard runs `taken` times as well.
                    for inner in &c.body {
                        if let Stmt::Work(w) = inner {
                            acc.instructions += (*w * taken) as f64;
                        }
                    }
                    self.calls(&c.body, taken, chained, levels, offset, acc)?;
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn repeat_call(
        &mut self,
        callee: &str,
        times: u64,
        chained: Option<&str>,
        levels: &mut [LevelAcc],
        offset: usize,
        acc: &mut Acc,
    ) -> Result<(), BeaconError> {
        let f = self.prog.function(callee)?;
        let work: u64 = f
            .body
            .iter()
            .map(|s| if let Stmt::Work(w) = s { *w } else { 0 })
            .sum();
        acc.instructions += (work * times) as f64;
        let nest = f.body.iter().find_map(|s| match s {
            Stmt::Nest(n) => Some(n),
            _ => None,
        });
        if let Some(n) = nest {
            // Only the chained callee contributes dimensions to the region.
            let mut scratch = [];
            for _ in 0..times {
                if chained == Some(callee) {
                    self.nest(callee, n, levels, offset, acc)?;
                } else {
                    self.nest(callee, n, &mut scratch, 0, acc)?;
                }
            }
        }
        Ok(())
    }

    /// Runs a function body outside any beacon region (everything folded into `acc`).
    fn body(&mut self, function: &str, body: &[Stmt], cycle: &BTreeSet<String>, depth: usize, invocations: &mut u64, acc: &mut Acc) -> Result<(), BeaconError> {
        for s in body {
            match s {
                Stmt::Work(w) => acc.instructions += *w as f64,
                Stmt::Nest(n) => self.nest(function, n, &mut [], 0, acc)?,
                Stmt::Call(c) => {
                    if cycle.contains(&c.callee) {
                        if depth < MAX_RECURSION_DEPTH {
                            self.invoke(&c.callee, cycle, depth + 1, invocations, acc)?;
                        }
                    } else {
                        self.invoke(&c.callee, &BTreeSet::new(), depth, invocations, acc)?;
                    }
                }
                Stmt::Cond(c) => {
                    if self.rng.random_bool(c.prob.clamp(0.0, 1.0)) {
                        self.body(function, &c.body, cycle, depth, invocations, acc)?;
                    }
                }
                Stmt::Loop(_) => {}
            }
        }
        Ok(())
    }

    fn invoke(&mut self, function: &str, cycle: &BTreeSet<String>, depth: usize, invocations: &mut u64, acc: &mut Acc) -> Result<(), BeaconError> {
        if cycle.contains(function) {
            *invocations += 1;
        }
        let f = self.prog.function(function)?;
        self.body(function, &f.body, cycle, depth, invocations, acc)
    }
}

fn stmt_at<'a>(prog: &'a Program, function: &str, path: &[usize]) -> Result<&'a Stmt, BeaconError> {
    let missing = || BeaconError::MissingSite(format!("{function}@{path:?}"));
    let mut body = &prog.function(function)?.body;
    let (last, prefix) = path.split_last().ok_or_else(missing)?;
    for i in prefix {
        match body.get(*i) {
            Some(Stmt::Cond(c)) => body = &c.body,
            _ => return Err(missing()),
        }
    }
    body.get(*last).ok_or_else(missing)
}

/// Executes one beacon region in isolation.
pub fn run_region<R: Rng + ?Sized>(
    inst: &Instrumented,
    site: &BeaconSite,
    params: &BTreeMap<String, u64>,
    rng: &mut R,
) -> Result<RegionOutcome, BeaconError> {
    let mut ctx = Ctx {
        prog: &inst.program,
        params,
        rng,
    };
    let mut acc = Acc::default();
    let mut levels = vec![LevelAcc::default(); site.depth()];
    match &site.location {
        SiteLocation::PreHeader { function, path } => {
            let Stmt::Nest(n) = stmt_at(&inst.program, function, path)? else {
                return Err(BeaconError::MissingSite(site.loop_id.to_string()));
            };
            ctx.nest(function, n, &mut levels, 0, &mut acc)?;
        }
        SiteLocation::CallEntry { callee, .. } => {
            let cycle = cycle_members(&inst.program, callee);
            let mut invocations = 0;
            ctx.invoke(callee, &cycle, 1, &mut invocations, &mut acc)?;
            levels[0] = LevelAcc {
                sum: invocations as f64,
                count: 1,
            };
        }
        _ => return Err(BeaconError::MissingSite(site.loop_id.to_string())),
    }
    let realized: Vec<f64> = levels
        .iter()
        .map(|l| if l.count == 0 { 0.0 } else { l.sum / l.count as f64 })
        .collect();
    let visible = realized
        .iter()
        .zip(&site.levels)
        .map(|(v, l)| l.visible.then_some(*v))
        .collect();
    Ok(RegionOutcome {
        instructions: acc.instructions,
        misses: acc.misses,
        run: RegionRun {
            loop_id: site.loop_id.clone(),
            visible,
            realized,
        },
    })
}

/// Expands the whole program run into segments, starting at the entry function.
pub fn compile_segments<R: Rng + ?Sized>(
    inst: &Instrumented,
    params: &BTreeMap<String, u64>,
    rng: &mut R,
) -> Result<Vec<Segment>, BeaconError> {
    let mut out = Vec::new();
    top(inst, &inst.program.entry, &inst.program.function(&inst.program.entry)?.body, &mut Vec::new(), params, rng, &mut out)?;
    Ok(out)
}

fn push_plain(out: &mut Vec<Segment>, instructions: f64) {
    if instructions <= 0.0 {
        return;
    }
    if let Some(last) = out.last_mut() {
        if last.region.is_none() {
            last.instructions += instructions;
            return;
        }
    }
    out.push(Segment {
        instructions,
        misses: 0.0,
        region: None,
    });
}

fn top<R: Rng + ?Sized>(
    inst: &Instrumented,
    function: &str,
    body: &[Stmt],
    path: &mut Vec<usize>,
    params: &BTreeMap<String, u64>,
    rng: &mut R,
    out: &mut Vec<Segment>,
) -> Result<(), BeaconError> {
    for (i, s) in body.iter().enumerate() {
        path.push(i);
        match s {
            Stmt::Work(w) => push_plain(out, *w as f64),
            Stmt::Nest(_) => {
                let site = inst
                    .site_at(function, path)
                    .ok_or_else(|| BeaconError::MissingSite(format!("{function}@{path:?}")))?;
                let r = run_region(inst, site, params, rng)?;
                out.push(Segment {
                    instructions: r.instructions,
                    misses: r.misses,
                    region: Some(r.run),
                });
            }
            Stmt::Call(c) => {
                if let Some(site) = inst.site_at(function, path) {
                    let r = run_region(inst, site, params, rng)?;
                    out.push(Segment {
                        instructions: r.instructions,
                        misses: r.misses,
                        region: Some(r.run),
                    });
                } else {
                    let callee = inst.program.function(&c.callee)?;
                    top(inst, &c.callee, &callee.body, &mut Vec::new(), params, rng, out)?;
                }
            }
            Stmt::Cond(c) => {
                if rng.random_bool(c.prob.clamp(0.0, 1.0)) {
                    top(inst, function, &c.body, path, params, rng, out)?;
                }
            }
            Stmt::Loop(_) => {}
        }
        path.pop();
    }
    Ok(())
}
