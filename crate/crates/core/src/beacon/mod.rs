//! Beacon placement and the runtime beacon event stream.
//!
//! Every top-level loop nest gets a beacon at its pre-header that announces the
//! nest's loop bounds. Nests inside functions called from a loop are folded into
//! the caller's beacon so the scheduler sees one region per outer nest; calls into
//! recursive cycles get a beacon on the entering call edge.

mod exec;

pub use exec::{compile_segments, run_region, RegionOutcome, RegionRun, Segment};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::model::BeaconKind;
use crate::workload::{inner_calls, BoundSpec, LoopId, LoopNest, Program, Stmt, WorkloadError};

/// Cap on recursion depth while executing a recursive region.
pub const MAX_RECURSION_DEPTH: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum BeaconError {
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("unsupported program shape in `{function}`: {reason}")]
    Unsupported { function: String, reason: String },
    #[error("pid {pid}: {message}")]
    UnbalancedEvents { pid: usize, message: String },
    #[error("no beacon site for {0}")]
    MissingSite(String),
    #[error("trace: {0}")]
    Trace(String),
}

/// A statement position: function plus indices through nested conditionals.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SiteLocation {
    PreHeader { function: String, path: Vec<usize> },
    NestExit { function: String, path: Vec<usize> },
    CallEntry { function: String, path: Vec<usize>, callee: String },
    CallReturn { function: String, path: Vec<usize>, callee: String },
}

/// One dimension of a beacon region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub loop_id: LoopId,
    pub function: String,
    /// Whether the bound's value is known when the beacon fires.
    pub visible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeaconSite {
    pub loop_id: LoopId,
    pub location: SiteLocation,
    pub kind: BeaconKind,
    /// Original pre-headers of callee nests folded into this region.
    pub hoisted_from: Vec<SiteLocation>,
    pub completions: Vec<SiteLocation>,
    pub levels: Vec<Level>,
}

impl BeaconSite {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

/// A program annotated with beacon sites.
#[derive(Clone, Debug, PartialEq)]
pub struct Instrumented {
    pub program: Program,
    pub sites: Vec<BeaconSite>,
    recursive: BTreeSet<String>,
    index: BTreeMap<(String, Vec<usize>), usize>,
}

impl Instrumented {
    pub fn site_at(&self, function: &str, path: &[usize]) -> Option<&BeaconSite> {
        self.index
            .get(&(function.to_string(), path.to_vec()))
            .map(|&i| &self.sites[i])
    }

    pub fn site(&self, id: &LoopId) -> Option<&BeaconSite> {
        self.sites.iter().find(|s| &s.loop_id == id)
    }

    pub fn is_recursive(&self, function: &str) -> bool {
        self.recursive.contains(function)
    }
}

/// Beacon type of a single nest: decided by its outermost bound.
pub fn classify(nest: &LoopNest) -> BeaconKind {
    if nest.root.bound.is_data_dependent() {
        BeaconKind::Expected
    } else {
        BeaconKind::Precise
    }
}

/// Functions that sit on a call-graph cycle.
pub fn recursive_functions(prog: &Program) -> BTreeSet<String> {
    let mut g: DiGraph<&str, ()> = DiGraph::new();
    let nodes: BTreeMap<&str, NodeIndex> = prog
        .functions
        .keys()
        .map(|n| (n.as_str(), g.add_node(n.as_str())))
        .collect();
    let edges = prog.call_edges();
    let mut self_loops = BTreeSet::new();
    for e in &edges {
        if let (Some(&a), Some(&b)) = (nodes.get(e.caller.as_str()), nodes.get(e.callee.as_str())) {
            g.add_edge(a, b, ());
            if a == b {
                self_loops.insert(e.caller.clone());
            }
        }
    }
    let mut out = self_loops;
    for scc in tarjan_scc(&g) {
        if scc.len() > 1 {
            out.extend(scc.into_iter().map(|n| g[n].to_string()));
        }
    }
    out
}

fn scc_of(prog: &Program, f: &str) -> BTreeSet<String> {
    // Functions mutually reachable with f.
    let reach = |start: &str| -> BTreeSet<String> {
        let edges = prog.call_edges();
        let mut seen = BTreeSet::new();
        let mut stack = vec![start.to_string()];
        while let Some(x) = stack.pop() {
            for e in edges.iter().filter(|e| e.caller == x) {
                if seen.insert(e.callee.clone()) {
                    stack.push(e.callee.clone());
                }
            }
        }
        seen
    };
    let from_f = reach(f);
    from_f
        .into_iter()
        .filter(|g| reach(g).contains(f))
        .collect()
}

/// Places beacons for every nest reachable outside loops.
pub fn instrument(prog: &Program) -> Result<Instrumented, BeaconError> {
    prog.validate()?;
    let recursive = recursive_functions(prog);
    if recursive.contains(&prog.entry) {
        return Err(BeaconError::Unsupported {
            function: prog.entry.clone(),
            reason: "entry function is recursive".into(),
        });
    }
    let mut sites = Vec::new();
    let mut visited = BTreeSet::new();
    walk_top(prog, &recursive, &prog.entry, &mut visited, &mut sites)?;
    let index = sites
        .iter()
        .enumerate()
        .map(|(i, s): (usize, &BeaconSite)| match &s.location {
            SiteLocation::PreHeader { function, path } | SiteLocation::CallEntry { function, path, .. } => {
                ((function.clone(), path.clone()), i)
            }
            _ => unreachable!("sites are placed at pre-headers or call entries"),
        })
        .collect();
    Ok(Instrumented {
        program: prog.clone(),
        sites,
        recursive,
        index,
    })
}

fn walk_top(
    prog: &Program,
    recursive: &BTreeSet<String>,
    function: &str,
    visited: &mut BTreeSet<String>,
    sites: &mut Vec<BeaconSite>,
) -> Result<(), BeaconError> {
    if !visited.insert(function.to_string()) {
        return Ok(());
    }
    let f = prog.function(function)?;
    let mut pending = Vec::new();
    walk_stmts(prog, recursive, function, &f.body, &mut Vec::new(), sites, &mut pending)?;
    for callee in pending {
        walk_top(prog, recursive, &callee, visited, sites)?;
    }
    Ok(())
}

fn walk_stmts(
    prog: &Program,
    recursive: &BTreeSet<String>,
    function: &str,
    body: &[Stmt],
    path: &mut Vec<usize>,
    sites: &mut Vec<BeaconSite>,
    pending: &mut Vec<String>,
) -> Result<(), BeaconError> {
    for (i, s) in body.iter().enumerate() {
        path.push(i);
        match s {
            Stmt::Nest(n) => sites.push(nest_site(prog, function, path, n)?),
            Stmt::Call(c) if recursive.contains(&c.callee) => {
                let id = LoopId(format!(
                    "{function}->{}@{}",
                    c.callee,
                    path.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(".")
                ));
                sites.push(BeaconSite {
                    loop_id: id.clone(),
                    location: SiteLocation::CallEntry {
                        function: function.to_string(),
                        path: path.clone(),
                        callee: c.callee.clone(),
                    },
                    kind: BeaconKind::Expected,
                    hoisted_from: Vec::new(),
                    completions: vec![SiteLocation::CallReturn {
                        function: function.to_string(),
                        path: path.clone(),
                        callee: c.callee.clone(),
                    }],
                    levels: vec![Level {
                        loop_id: id,
                        function: c.callee.clone(),
                        visible: false,
                    }],
                });
            }
            Stmt::Call(c) => pending.push(c.callee.clone()),
            Stmt::Cond(c) => walk_stmts(prog, recursive, function, &c.body, path, sites, pending)?,
            Stmt::Work(_) | Stmt::Loop(_) => {}
        }
        path.pop();
    }
    Ok(())
}

/// The nest-bearing callee invoked from `nest`'s innermost body, if any.
pub(crate) fn nest_callee<'a>(
    prog: &'a Program,
    function: &str,
    nest: &'a LoopNest,
) -> Result<Option<(&'a crate::workload::CallSite, &'a LoopNest, bool)>, BeaconError> {
    let inner = nest.innermost();
    let mut found = None;
    for call in inner_calls(inner) {
        let g = prog.function(&call.callee)?;
        let callee_nest = g.body.iter().find_map(|s| match s {
            Stmt::Nest(n) => Some(n),
            _ => None,
        });
        if let Some(cn) = callee_nest {
            if found.is_some() {
                return Err(BeaconError::Unsupported {
                    function: function.to_string(),
                    reason: format!("loop {} calls more than one function with a loop nest", inner.id),
                });
            }
            let conditional = !inner.body.iter().any(|s| matches!(s, Stmt::Call(c) if c == call));
            found = Some((call, cn, conditional));
        }
    }
    Ok(found)
}

fn nest_site(prog: &Program, function: &str, path: &[usize], nest: &LoopNest) -> Result<BeaconSite, BeaconError> {
    let mut levels: Vec<Level> = nest
        .chain()
        .iter()
        .map(|l| Level {
            loop_id: l.id.clone(),
            function: function.to_string(),
            visible: !l.bound.is_data_dependent(),
        })
        .collect();
    let mut kind = classify(nest);
    let mut hoisted_from = Vec::new();
    // Parameters the beacon can still see after crossing call boundaries.
    let mut forwarded: Option<BTreeSet<String>> = None;
    let mut current = (function.to_string(), nest);
    while let Some((call, callee_nest, conditional)) = nest_callee(prog, &current.0, current.1)? {
        let args: BTreeSet<String> = call.args.iter().cloned().collect();
        let now: BTreeSet<String> = match &forwarded {
            None => args,
            Some(prev) => prev.intersection(&args).cloned().collect(),
        };
        if conditional {
            kind = BeaconKind::Expected;
        }
        let callee_fn = prog.function(&call.callee)?;
        let nest_idx = callee_fn
            .body
            .iter()
            .position(|s| matches!(s, Stmt::Nest(_)))
            .expect("callee nest exists");
        hoisted_from.push(SiteLocation::PreHeader {
            function: call.callee.clone(),
            path: vec![nest_idx],
        });
        for l in callee_nest.chain() {
            let visible = match &l.bound {
                BoundSpec::Constant(_) => true,
                BoundSpec::Param(p) => now.contains(p),
                BoundSpec::DataDependent { .. } => false,
            };
            if !visible {
                kind = BeaconKind::Expected;
            }
            levels.push(Level {
                loop_id: l.id.clone(),
                function: call.callee.clone(),
                visible,
            });
        }
        forwarded = Some(now);
        current = (call.callee.clone(), callee_nest);
    }
    Ok(BeaconSite {
        loop_id: nest.id().clone(),
        location: SiteLocation::PreHeader {
            function: function.to_string(),
            path: path.to_vec(),
        },
        kind,
        hoisted_from,
        completions: vec![SiteLocation::NestExit {
            function: function.to_string(),
            path: path.to_vec(),
        }],
        levels,
    })
}

/// Functions mutually recursive with `f` (including itself when on a cycle).
pub fn cycle_members(prog: &Program, f: &str) -> BTreeSet<String> {
    scc_of(prog, f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Enter,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeaconEvent {
    pub tick: u64,
    pub pid: usize,
    pub loop_id: LoopId,
    pub phase: Phase,
    /// Set on `Enter` events when a model is available.
    pub predicted_upper: Option<f64>,
}

/// Checks that every process's events form properly nested enter/complete pairs
/// in non-decreasing tick order.
pub fn validate_events(events: &[BeaconEvent]) -> Result<(), BeaconError> {
    let mut stacks: BTreeMap<usize, (u64, Vec<&LoopId>)> = BTreeMap::new();
    for e in events {
        let (last_tick, stack) = stacks.entry(e.pid).or_insert((0, Vec::new()));
        let fail = |message: String| BeaconError::UnbalancedEvents { pid: e.pid, message };
        if e.tick < *last_tick {
            return Err(fail(format!("tick {} after tick {}", e.tick, last_tick)));
        }
        *last_tick = e.tick;
        match e.phase {
            Phase::Enter => stack.push(&e.loop_id),
            Phase::Complete => match stack.pop() {
                Some(top) if top == &e.loop_id => {}
                Some(top) => {
                    return Err(fail(format!("complete of {} while {} is open", e.loop_id, top)))
                }
                None => return Err(fail(format!("complete of {} without enter", e.loop_id))),
            },
        }
    }
    Ok(())
}

pub const TRACE_HEADER: [&str; 5] = ["tick", "pid", "loop_id", "phase", "predicted_upper"];

pub fn write_trace<W: Write>(out: W, events: &[BeaconEvent]) -> Result<(), BeaconError> {
    let err = |e: csv::Error| BeaconError::Trace(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER).map_err(err)?;
    for e in events {
        let phase = match e.phase {
            Phase::Enter => "enter",
            Phase::Complete => "complete",
        };
        let upper = e.predicted_upper.map(|v| format!("{v:.3}")).unwrap_or_default();
        w.write_record([
            e.tick.to_string(),
            e.pid.to_string(),
            e.loop_id.to_string(),
            phase.to_string(),
            upper,
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| BeaconError::Trace(e.to_string()))
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<BeaconEvent>, BeaconError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| BeaconError::Trace(e.to_string()))?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |what: &str| BeaconError::Trace(format!("bad {what} in {:?}", rec));
        out.push(BeaconEvent {
            tick: field(0).parse().map_err(|_| bad("tick"))?,
            pid: field(1).parse().map_err(|_| bad("pid"))?,
            loop_id: LoopId::new(field(2)),
            phase: match field(3) {
                "enter" => Phase::Enter,
                "complete" => Phase::Complete,
                _ => return Err(bad("phase")),
            },
            predicted_upper: match field(4) {
                "" => None,
                v => Some(v.parse().map_err(|_| bad("predicted_upper"))?),
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{CallSite, Conditional, Function, Loop};

    fn func(name: &str, body: Vec<Stmt>) -> (String, Function) {
        (
            name.to_string(),
            Function {
                name: name.to_string(),
                body,
            },
        )
    }

    fn call(callee: &str, args: &[&str]) -> Stmt {
        Stmt::Call(CallSite {
            callee: callee.to_string(),
            args: args.iter().map(|a| a.to_string()).collect(),
        })
    }

    fn nest(id: &str, bounds: Vec<BoundSpec>, innermost: Vec<Stmt>) -> LoopNest {
        let depth = bounds.len();
        let mut body = innermost;
        let mut l = None;
        for (i, b) in bounds.into_iter().enumerate().rev() {
            let lp = Loop::new(format!("{id}.{i}"), b).with_body(body);
            body = vec![Stmt::Loop(lp.clone())];
            l = Some(lp);
        }
        let mut root = l.unwrap();
        root.id = LoopId::new(id);
        LoopNest::new(root, vec![1.0; depth + 1], 0.0).unwrap()
    }

    fn program(functions: Vec<(String, Function)>) -> Program {
        Program {
            name: "t".into(),
            entry: "main".into(),
            params: BTreeMap::new(),
            libraries: vec![],
            functions: functions.into_iter().collect(),
        }
    }

    fn dd() -> BoundSpec {
        BoundSpec::DataDependent {
            mean: 10.0,
            stddev: 1.0,
            min: 1,
        }
    }

    #[test]
    fn classification_follows_outermost_bound() {
        let n = nest("a", vec![BoundSpec::Constant(4), dd()], vec![]);
        assert_eq!(classify(&n), BeaconKind::Precise);
        let n = nest("b", vec![dd(), BoundSpec::Param("N".into())], vec![]);
        assert_eq!(classify(&n), BeaconKind::Expected);
        let n = nest("c", vec![BoundSpec::Param("N".into())], vec![]);
        assert_eq!(classify(&n), BeaconKind::Precise);
    }

    #[test]
    fn callee_nest_is_folded_into_caller() {
        let p = program(vec![
            func(
                "main",
                vec![Stmt::Nest(nest(
                    "outer",
                    vec![BoundSpec::Param("N".into())],
                    vec![call("g", &["M"])],
                ))],
            ),
            func(
                "g",
                vec![Stmt::Nest(nest("inner", vec![BoundSpec::Param("M".into())], vec![]))],
            ),
        ]);
        let inst = instrument(&p).unwrap();
        assert_eq!(inst.sites.len(), 1);
        let s = &inst.sites[0];
        assert_eq!(s.loop_id, LoopId::new("outer"));
        assert_eq!(s.kind, BeaconKind::Precise);
        assert_eq!(s.depth(), 2);
        assert_eq!(
            s.hoisted_from,
            vec![SiteLocation::PreHeader {
                function: "g".into(),
                path: vec![0]
            }]
        );
    }

    #[test]
    fn unforwarded_callee_bound_turns_expected() {
        let p = program(vec![
            func(
                "main",
                vec![Stmt::Nest(nest(
                    "outer",
                    vec![BoundSpec::Param("N".into())],
                    vec![call("g", &[])],
                ))],
            ),
            func(
                "g",
                vec![Stmt::Nest(nest("inner", vec![BoundSpec::Param("M".into())], vec![]))],
            ),
        ]);
        let s = &instrument(&p).unwrap().sites[0];
        assert_eq!(s.kind, BeaconKind::Expected);
        assert!(s.levels[0].visible && !s.levels[1].visible);
    }

    #[test]
    fn conditional_call_in_loop_turns_expected() {
        let p = program(vec![
            func(
                "main",
                vec![Stmt::Nest(nest(
                    "outer",
                    vec![BoundSpec::Constant(10)],
                    vec![Stmt::Cond(Conditional {
                        prob: 0.5,
                        body: vec![call("g", &[])],
                    })],
                ))],
            ),
            func(
                "g",
                vec![Stmt::Nest(nest("inner", vec![BoundSpec::Constant(3)], vec![]))],
            ),
        ]);
        assert_eq!(instrument(&p).unwrap().sites[0].kind, BeaconKind::Expected);
    }

    #[test]
    fn nest_inside_conditional_keeps_its_beacon_inside() {
        let p = program(vec![func(
            "main",
            vec![Stmt::Cond(Conditional {
                prob: 0.3,
                body: vec![Stmt::Nest(nest("a", vec![BoundSpec::Constant(5)], vec![]))],
            })],
        )]);
        let inst = instrument(&p).unwrap();
        assert!(inst.site_at("main", &[0, 0]).is_some());
        assert!(inst.site_at("main", &[0]).is_none());
    }

    #[test]
    fn recursion_gets_call_edge_beacon() {
        let p = program(vec![
            func("main", vec![call("f", &[])]),
            func(
                "f",
                vec![
                    Stmt::Nest(nest("fn", vec![BoundSpec::Constant(3)], vec![])),
                    Stmt::Cond(Conditional {
                        prob: 0.5,
                        body: vec![call("f", &[])],
                    }),
                ],
            ),
        ]);
        let inst = instrument(&p).unwrap();
        assert_eq!(inst.sites.len(), 1);
        let s = &inst.sites[0];
        assert_eq!(s.kind, BeaconKind::Expected);
        assert!(matches!(s.location, SiteLocation::CallEntry { .. }));
        assert!(matches!(s.completions[0], SiteLocation::CallReturn { .. }));
        assert!(inst.is_recursive("f"));
        assert_eq!(cycle_members(&p, "f"), BTreeSet::from(["f".to_string()]));
    }

    #[test]
    fn two_nest_callees_in_one_body_are_unsupported() {
        let g = |n: &str| func(n, vec![Stmt::Nest(nest(&format!("{n}n"), vec![BoundSpec::Constant(3)], vec![]))]);
        let p = program(vec![
            func(
                "main",
                vec![Stmt::Nest(nest(
                    "outer",
                    vec![BoundSpec::Constant(10)],
                    vec![call("g", &[]), call("h", &[])],
                ))],
            ),
            g("g"),
            g("h"),
        ]);
        assert!(matches!(instrument(&p), Err(BeaconError::Unsupported { .. })));
    }

    fn ev(tick: u64, id: &str, phase: Phase) -> BeaconEvent {
        BeaconEvent {
            tick,
            pid: 1,
            loop_id: LoopId::new(id),
            phase,
            predicted_upper: None,
        }
    }

    #[test]
    fn event_validation() {
        let ok = vec![ev(0, "a", Phase::Enter), ev(5, "a", Phase::Complete), ev(5, "b", Phase::Enter)];
        assert!(validate_events(&ok).is_ok());
        let crossed = vec![
            ev(0, "a", Phase::Enter),
            ev(1, "b", Phase::Enter),
            ev(2, "a", Phase::Complete),
        ];
        assert!(validate_events(&crossed).is_err());
        assert!(validate_events(&[ev(0, "a", Phase::Complete)]).is_err());
        let backwards = vec![ev(4, "a", Phase::Enter), ev(3, "a", Phase::Complete)];
        assert!(validate_events(&backwards).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let mut events = vec![ev(0, "a", Phase::Enter), ev(9, "a", Phase::Complete)];
        events[0].predicted_upper = Some(1234.5);
        let mut buf = Vec::new();
        write_trace(&mut buf, &events).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("tick,pid,loop_id,phase,predicted_upper\n"));
        assert_eq!(read_trace(&buf[..]).unwrap(), events);
    }
}
