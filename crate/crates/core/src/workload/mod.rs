//! Synthetic program IR with ground-truth cache-miss semantics.
//!
//! A [`Program`] is a set of functions whose bodies contain loop nests, call
//! sites, conditionals and straight-line work. Every [`LoopNest`] is a
//! rectangular chain of loops carrying the hidden miss coefficients the cache
//! model is expected to recover:
//!
//! ```text
//! misses(lb1..lbn) = b0 + b1*lb1 + b2*lb1*lb2 + ... + bn*lb1*...*lbn
//! ```
//!
//! perturbed by a multiplicative factor drawn uniformly from
//! `[1 - noise_frac, 1 + noise_frac]`.

mod file;

pub use file::{load_program, parse_program, program_to_toml};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a loop (and of the beacon region rooted at it).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LoopId(pub String);

impl LoopId {
    pub fn new(id: impl Into<String>) -> Self {
        LoopId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LoopId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LoopId {
    fn from(s: &str) -> Self {
        LoopId(s.to_string())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("loop {0}: step of 0")]
    MalformedLoop(LoopId),
    #[error("loop {loop_id}: parameter `{param}` is not bound")]
    UnresolvedBound { loop_id: LoopId, param: String },
    #[error("bounds length {got} does not match nest depth {depth}")]
    DepthMismatch { depth: usize, got: usize },
    #[error("duplicate loop id {0}")]
    DuplicateLoopId(LoopId),
    #[error("function `{0}` is not defined")]
    UnknownFunction(String),
    #[error("nest {loop_id}: {reason}")]
    InvalidNest { loop_id: LoopId, reason: String },
    #[error("unsupported program shape in `{function}`: {reason}")]
    Unsupported { function: String, reason: String },
    #[error("program parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

/// How a loop's upper bound is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundSpec {
    Constant(u64),
    /// Loop-invariant value bound when the nest is entered.
    Param(String),
    /// Trip count known only once the loop exits; redrawn on every nest entry.
    DataDependent { mean: f64, stddev: f64, min: u64 },
}

impl BoundSpec {
    pub fn is_data_dependent(&self) -> bool {
        matches!(self, BoundSpec::DataDependent { .. })
    }

    fn resolve<R: Rng + ?Sized>(
        &self,
        loop_id: &LoopId,
        params: &BTreeMap<String, u64>,
        rng: &mut R,
    ) -> Result<i64, WorkloadError> {
        match self {
            BoundSpec::Constant(v) => Ok(*v as i64),
            BoundSpec::Param(name) => params.get(name).map(|v| *v as i64).ok_or_else(|| {
                WorkloadError::UnresolvedBound {
                    loop_id: loop_id.clone(),
                    param: name.clone(),
                }
            }),
            BoundSpec::DataDependent { mean, stddev, min } => {
                let min = (*min).max(1);
                let draw = if *stddev > 0.0 {
                    Normal::new(*mean, *stddev)
                        .map(|n| n.sample(rng))
                        .unwrap_or(*mean)
                } else {
                    *mean
                };
                Ok((draw.round() as i64).max(min as i64))
            }
        }
    }
}

/// Index remapping recorded by normalization: `original = offset + stride * i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRemap {
    pub offset: i64,
    pub stride: i64,
}

impl Default for IndexRemap {
    fn default() -> Self {
        IndexRemap { offset: 0, stride: 1 }
    }
}

impl IndexRemap {
    fn is_identity(&self) -> bool {
        self.offset == 0 && self.stride == 1
    }
}

/// `for (i = start; i < bound; i += step)` (or `i > bound` when `step < 0`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Loop {
    pub id: LoopId,
    pub bound: BoundSpec,
    pub start: i64,
    pub step: i64,
    /// Set by [`normalize_loop`] when the bound could not be folded into a constant.
    #[serde(default, skip_serializing_if = "IndexRemap::is_identity")]
    pub remap: IndexRemap,
    pub body: Vec<Stmt>,
}

impl Loop {
    pub fn new(id: impl Into<String>, bound: BoundSpec) -> Self {
        Loop {
            id: LoopId::new(id),
            bound,
            start: 0,
            step: 1,
            remap: IndexRemap::default(),
            body: Vec::new(),
        }
    }

    pub fn with_body(mut self, body: Vec<Stmt>) -> Self {
        self.body = body;
        self
    }

    pub fn with_header(mut self, start: i64, step: i64) -> Self {
        self.start = start;
        self.step = step;
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.start == 0 && self.step == 1
    }

    /// Instructions retired by one iteration of this loop, excluding inner loops and calls.
    pub fn work_per_iteration(&self) -> u64 {
        self.body
            .iter()
            .map(|s| match s {
                Stmt::Work(w) => *w,
                _ => 0,
            })
            .sum()
    }

    /// The directly nested loop, if any.
    pub fn inner(&self) -> Option<&Loop> {
        self.body.iter().find_map(|s| match s {
            Stmt::Loop(l) => Some(l),
            _ => None,
        })
    }

    /// Number of iterations for a resolved raw bound value.
    pub fn trip_count(&self, raw_bound: i64) -> Result<u64, WorkloadError> {
        if self.step == 0 || self.remap.stride == 0 {
            return Err(WorkloadError::MalformedLoop(self.id.clone()));
        }
        let remapped = if self.remap.is_identity() {
            raw_bound
        } else {
            ceil_div(raw_bound - self.remap.offset, self.remap.stride)
        };
        Ok(ceil_div(remapped - self.start, self.step).max(0) as u64)
    }
}

fn ceil_div(a: i64, b: i64) -> i64 {
    let q = a / b;
    if (a % b != 0) && ((a < 0) == (b < 0)) {
        q + 1
    } else {
        q
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallSite {
    pub callee: String,
    /// Parameter names forwarded to the callee; they stay visible at hoisted beacon sites.
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditional {
    /// Probability that the guarded body executes.
    pub prob: f64,
    pub body: Vec<Stmt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stmt {
    /// Outermost loop of a nest; only legal at function level.
    Nest(LoopNest),
    /// Next level of the enclosing nest; only legal inside a loop body.
    Loop(Loop),
    Call(CallSite),
    /// Instructions per iteration inside a loop, or executed once at function level.
    Work(u64),
    Cond(Conditional),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopNest {
    pub root: Loop,
    pub true_coeffs: Vec<f64>,
    pub noise_frac: f64,
}

impl LoopNest {
    pub fn new(root: Loop, true_coeffs: Vec<f64>, noise_frac: f64) -> Result<Self, WorkloadError> {
        let nest = LoopNest {
            root,
            true_coeffs,
            noise_frac,
        };
        nest.validate()?;
        Ok(nest)
    }

    pub fn id(&self) -> &LoopId {
        &self.root.id
    }

    /// Loops from outermost to innermost.
    pub fn chain(&self) -> Vec<&Loop> {
        let mut out = vec![&self.root];
        while let Some(inner) = out.last().and_then(|l| l.inner()) {
            out.push(inner);
        }
        out
    }

    pub fn depth(&self) -> usize {
        self.chain().len()
    }

    pub fn innermost(&self) -> &Loop {
        self.chain().pop().expect("chain is never empty")
    }

    /// Instructions for one execution of the nest (own work only, no calls).
    pub fn instructions(&self, bounds: &[u64]) -> f64 {
        let mut prefix = 1.0;
        let mut total = 0.0;
        for (l, b) in self.chain().iter().zip(bounds) {
            prefix *= *b as f64;
            total += prefix * l.work_per_iteration() as f64;
        }
        total
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let chain = self.chain();
        let invalid = |reason: String| WorkloadError::InvalidNest {
            loop_id: self.root.id.clone(),
            reason,
        };
        if self.true_coeffs.len() != chain.len() + 1 {
            return Err(invalid(format!(
                "true_coeffs has {} entries, expected depth + 1 = {}",
                self.true_coeffs.len(),
                chain.len() + 1
            )));
        }
        if self.true_coeffs.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(invalid("true_coeffs must be finite and non-negative".into()));
        }
        if !(0.0..=0.5).contains(&self.noise_frac) {
            return Err(invalid(format!("noise_frac {} outside [0, 0.5]", self.noise_frac)));
        }
        for l in &chain {
            if l.step == 0 {
                return Err(WorkloadError::MalformedLoop(l.id.clone()));
            }
            let loops = l.body.iter().filter(|s| matches!(s, Stmt::Loop(_))).count();
            if loops > 1 {
                return Err(invalid(format!(
                    "loop {} has {loops} sibling inner loops; only rectangular chains are supported",
                    l.id
                )));
            }
            if let BoundSpec::DataDependent { mean, stddev, min } = &l.bound {
                if !(*mean > 0.0 && *stddev >= 0.0 && *min >= 1) {
                    return Err(invalid(format!("loop {}: bad data-dependent distribution", l.id)));
                }
            }
            if let BoundSpec::Constant(0) = l.bound {
                if l.is_normalized() && l.remap.is_identity() {
                    // normalized empty loop
                } else {
                    return Err(invalid(format!("loop {}: constant bound must be >= 1", l.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub body: Vec<Stmt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub entry: String,
    /// Default parameter values; scenarios may override them per process.
    #[serde(default)]
    pub params: BTreeMap<String, u64>,
    /// Shared-library tags the program links against.
    #[serde(default)]
    pub libraries: Vec<String>,
    pub functions: BTreeMap<String, Function>,
}

/// One edge of the call graph.
#[derive(Clone, Debug, PartialEq)]
pub struct CallEdge {
    pub caller: String,
    pub callee: String,
    pub in_loop: bool,
    pub conditional: bool,
}

impl Program {
    pub fn function(&self, name: &str) -> Result<&Function, WorkloadError> {
        self.functions
            .get(name)
            .ok_or_else(|| WorkloadError::UnknownFunction(name.to_string()))
    }

    /// Directed multigraph of call sites.
    pub fn call_edges(&self) -> Vec<CallEdge> {
        fn walk(caller: &str, body: &[Stmt], in_loop: bool, cond: bool, out: &mut Vec<CallEdge>) {
            for s in body {
                match s {
                    Stmt::Call(c) => out.push(CallEdge {
                        caller: caller.to_string(),
                        callee: c.callee.clone(),
                        in_loop,
                        conditional: cond,
                    }),
                    Stmt::Nest(n) => walk(caller, &n.root.body, true, cond, out),
                    Stmt::Loop(l) => walk(caller, &l.body, true, cond, out),
                    Stmt::Cond(c) => walk(caller, &c.body, in_loop, true, out),
                    Stmt::Work(_) => {}
                }
            }
        }
        let mut out = Vec::new();
        for (name, f) in &self.functions {
            walk(name, &f.body, false, false, &mut out);
        }
        out
    }

    /// Every nest in the program, in function-name then program order.
    pub fn nests(&self) -> Vec<(&str, &LoopNest)> {
        fn walk<'a>(f: &'a str, body: &'a [Stmt], out: &mut Vec<(&'a str, &'a LoopNest)>) {
            for s in body {
                match s {
                    Stmt::Nest(n) => out.push((f, n)),
                    Stmt::Cond(c) => walk(f, &c.body, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        for (name, func) in &self.functions {
            walk(name, &func.body, &mut out);
        }
        out
    }

    /// Every parameter name referenced by a loop bound.
    pub fn param_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for (_, n) in self.nests() {
            for l in n.chain() {
                if let BoundSpec::Param(p) = &l.bound {
                    out.insert(p.clone());
                }
            }
        }
        out
    }

    /// Structural checks: targets exist, ids are unique, nests are well formed
    /// and call sites sit where beacon hoisting can handle them.
    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.function(&self.entry)?;
        let mut ids = BTreeSet::new();
        for (fname, f) in &self.functions {
            if fname != &f.name {
                return Err(WorkloadError::Unsupported {
                    function: fname.clone(),
                    reason: format!("map key does not match function name `{}`", f.name),
                });
            }
            validate_body(fname, &f.body, BodyContext::Function, &mut ids)?;
        }
        for e in self.call_edges() {
            self.function(&e.callee)?;
        }
        let recursive = crate::beacon::recursive_functions(self);
        // Callees reached from inside a loop are folded into the caller's beacon.
        let mut loop_callees: Vec<String> = self
            .call_edges()
            .into_iter()
            .filter(|e| e.in_loop)
            .map(|e| e.callee)
            .collect();
        let mut seen = BTreeSet::new();
        while let Some(g) = loop_callees.pop() {
            if !seen.insert(g.clone()) {
                continue;
            }
            if recursive.contains(&g) {
                return Err(WorkloadError::Unsupported {
                    function: g,
                    reason: "recursive function invoked from inside a loop".into(),
                });
            }
            let f = self.function(&g)?;
            let mut nests = 0;
            for s in &f.body {
                match s {
                    Stmt::Nest(n) => {
                        nests += 1;
                        for c in inner_calls(n.innermost()) {
                            loop_callees.push(c.callee.clone());
                        }
                    }
                    Stmt::Work(_) => {}
                    _ => {
                        return Err(WorkloadError::Unsupported {
                            function: g.clone(),
                            reason: "functions called from loops may only hold work and one nest"
                                .into(),
                        })
                    }
                }
            }
            if nests > 1 {
                return Err(WorkloadError::Unsupported {
                    function: g,
                    reason: "functions called from loops may hold at most one nest".into(),
                });
            }
        }
        Ok(())
    }
}

/// Calls in a loop body, directly or under conditionals, with their guard probability.
pub(crate) fn inner_calls(l: &Loop) -> Vec<&CallSite> {
    fn walk<'a>(body: &'a [Stmt], out: &mut Vec<&'a CallSite>) {
        for s in body {
            match s {
                Stmt::Call(c) => out.push(c),
                Stmt::Cond(c) => walk(&c.body, out),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(&l.body, &mut out);
    out
}

#[derive(Clone, Copy, PartialEq)]
enum BodyContext {
    Function,
    Loop { innermost: bool },
}

fn validate_body(
    fname: &str,
    body: &[Stmt],
    ctx: BodyContext,
    ids: &mut BTreeSet<LoopId>,
) -> Result<(), WorkloadError> {
    let unsupported = |reason: &str| WorkloadError::Unsupported {
        function: fname.to_string(),
        reason: reason.to_string(),
    };
    for s in body {
        match (s, ctx) {
            (Stmt::Nest(n), BodyContext::Function) => {
                n.validate()?;
                let chain = n.chain();
                let depth = chain.len();
                for (i, l) in chain.into_iter().enumerate() {
                    if !ids.insert(l.id.clone()) {
                        return Err(WorkloadError::DuplicateLoopId(l.id.clone()));
                    }
                    let body_ctx = BodyContext::Loop {
                        innermost: i + 1 == depth,
                    };
                    let own: Vec<Stmt> = l
                        .body
                        .iter()
                        .filter(|s| !matches!(s, Stmt::Loop(_)))
                        .cloned()
                        .collect();
                    validate_body(fname, &own, body_ctx, ids)?;
                }
            }
            (Stmt::Nest(_), BodyContext::Loop { .. }) => {
                return Err(unsupported("nest statement inside a loop; use a loop level"))
            }
            (Stmt::Loop(_), _) => return Err(unsupported("loop outside a nest chain")),
            (Stmt::Call(_), BodyContext::Loop { innermost: false }) => {
                return Err(unsupported(
                    "call in a non-innermost loop level (only rectangular products are modeled)",
                ))
            }
            (Stmt::Cond(c), _) => {
                if !(0.0..=1.0).contains(&c.prob) {
                    return Err(unsupported("conditional probability outside [0, 1]"));
                }
                if let BodyContext::Loop { .. } = ctx {
                    if c.body.iter().any(|s| matches!(s, Stmt::Loop(_) | Stmt::Nest(_))) {
                        return Err(unsupported("loop under a conditional inside a loop"));
                    }
                }
                validate_body(fname, &c.body, ctx, ids)?;
            }
            _ => {}
        }
    }
    Ok(())
}

/// Rewrites a loop so that it starts at 0 and steps by 1, preserving its trip count.
///
/// Constant bounds fold into a new constant; symbolic bounds keep their spec and
/// record the index remapping so the trip count is `ceil((N - start) / step)`.
pub fn normalize_loop(l: &Loop) -> Result<Loop, WorkloadError> {
    if l.step == 0 || l.remap.stride == 0 {
        return Err(WorkloadError::MalformedLoop(l.id.clone()));
    }
    let body = l
        .body
        .iter()
        .map(|s| match s {
            Stmt::Loop(inner) => normalize_loop(inner).map(Stmt::Loop),
            other => Ok(other.clone()),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if l.is_normalized() {
        return Ok(Loop { body, ..l.clone() });
    }
    let (bound, remap) = match &l.bound {
        BoundSpec::Constant(n) => {
            let trips = l.trip_count(*n as i64)?;
            (BoundSpec::Constant(trips), IndexRemap::default())
        }
        other => {
            if !l.remap.is_identity() {
                // Already carries a remap from an earlier pass with a non-unit header; compose.
                return Err(WorkloadError::MalformedLoop(l.id.clone()));
            }
            (
                other.clone(),
                IndexRemap {
                    offset: l.start,
                    stride: l.step,
                },
            )
        }
    };
    Ok(Loop {
        id: l.id.clone(),
        bound,
        start: 0,
        step: 1,
        remap,
        body,
    })
}

/// Normalizes every loop of a nest.
pub fn normalize_nest(n: &LoopNest) -> Result<LoopNest, WorkloadError> {
    Ok(LoopNest {
        root: normalize_loop(&n.root)?,
        true_coeffs: n.true_coeffs.clone(),
        noise_frac: n.noise_frac,
    })
}

/// Trip counts of every level, outermost first.
pub fn resolve_bounds<R: Rng + ?Sized>(
    nest: &LoopNest,
    params: &BTreeMap<String, u64>,
    rng: &mut R,
) -> Result<Vec<u64>, WorkloadError> {
    nest.chain()
        .into_iter()
        .map(|l| {
            let raw = l.bound.resolve(&l.id, params, rng)?;
            l.trip_count(raw)
        })
        .collect()
}

/// The noiseless miss polynomial of a nest.
pub fn miss_polynomial(coeffs: &[f64], bounds: &[u64]) -> f64 {
    let mut prefix = 1.0;
    let mut total = coeffs[0];
    for (c, b) in coeffs[1..].iter().zip(bounds) {
        prefix *= *b as f64;
        total += c * prefix;
    }
    total
}

/// Hidden ground-truth misses for one execution of `nest` at `bounds`.
pub fn ground_truth_misses<R: Rng + ?Sized>(
    nest: &LoopNest,
    bounds: &[u64],
    rng: &mut R,
) -> Result<f64, WorkloadError> {
    let depth = nest.true_coeffs.len() - 1;
    if bounds.len() != depth {
        return Err(WorkloadError::DepthMismatch {
            depth,
            got: bounds.len(),
        });
    }
    let base = miss_polynomial(&nest.true_coeffs, bounds);
    if nest.noise_frac == 0.0 {
        return Ok(base);
    }
    let factor = rng.random_range(1.0 - nest.noise_frac..=1.0 + nest.noise_frac);
    Ok(base * factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn nest2(c: Vec<f64>, noise: f64) -> LoopNest {
        let inner = Loop::new("i1", BoundSpec::Constant(8)).with_body(vec![Stmt::Work(10)]);
        let root = Loop::new("i0", BoundSpec::Constant(8)).with_body(vec![Stmt::Loop(inner)]);
        LoopNest::new(root, c, noise).unwrap()
    }

    fn direct_count(s: i64, n: i64, d: i64) -> u64 {
        let mut count = 0;
        let mut i = s;
        while (d > 0 && i < n) || (d < 0 && i > n) {
            count += 1;
            i += d;
        }
        count
    }

    #[test]
    fn listing_style_loop_normalizes_to_half_minus_five() {
        // for (i = 10; i < N; i += 2) with N = 100 runs 45 times = N/2 - 5
        let l = Loop::new("l", BoundSpec::Param("N".into())).with_header(10, 2);
        let n = normalize_loop(&l).unwrap();
        assert!(n.is_normalized());
        assert_eq!(n.remap, IndexRemap { offset: 10, stride: 2 });
        assert_eq!(n.trip_count(100).unwrap(), 45);
        let c = Loop::new("c", BoundSpec::Constant(100)).with_header(10, 2);
        assert_eq!(normalize_loop(&c).unwrap().bound, BoundSpec::Constant(45));
    }

    #[test]
    fn normal_loop_is_unchanged() {
        let l = Loop::new("l", BoundSpec::Param("N".into())).with_body(vec![Stmt::Work(3)]);
        assert_eq!(normalize_loop(&l).unwrap(), l);
    }

    #[test]
    fn empty_range_becomes_zero_trip_loop() {
        let l = Loop::new("l", BoundSpec::Constant(3)).with_header(3, 1);
        let n = normalize_loop(&l).unwrap();
        assert_eq!(n.bound, BoundSpec::Constant(0));
        assert_eq!(n.trip_count(0).unwrap(), 0);
    }

    #[test]
    fn zero_step_is_malformed() {
        let l = Loop::new("l", BoundSpec::Constant(3)).with_header(0, 0);
        assert_eq!(normalize_loop(&l), Err(WorkloadError::MalformedLoop(LoopId::new("l"))));
    }

    #[test]
    fn normalization_remaps_inner_loops_too() {
        let inner = Loop::new("in", BoundSpec::Constant(20)).with_header(2, 3);
        let outer = Loop::new("out", BoundSpec::Constant(5)).with_body(vec![Stmt::Loop(inner)]);
        let n = normalize_loop(&outer).unwrap();
        assert_eq!(n.inner().unwrap().bound, BoundSpec::Constant(6));
    }

    #[test]
    fn resolve_constant_param_and_zero_variance() {
        let n = nest2(vec![1.0, 1.0, 1.0], 0.0);
        let p = BTreeMap::new();
        assert_eq!(resolve_bounds(&n, &p, &mut rng(1)).unwrap(), vec![8, 8]);

        let root = Loop::new("p", BoundSpec::Param("N".into()));
        let n = LoopNest::new(root, vec![0.0, 1.0], 0.0).unwrap();
        let p = BTreeMap::from([("N".to_string(), 100)]);
        assert_eq!(resolve_bounds(&n, &p, &mut rng(1)).unwrap(), vec![100]);
        assert_eq!(
            resolve_bounds(&n, &BTreeMap::new(), &mut rng(1)),
            Err(WorkloadError::UnresolvedBound {
                loop_id: LoopId::new("p"),
                param: "N".into()
            })
        );

        let root = Loop::new(
            "d",
            BoundSpec::DataDependent {
                mean: 50.0,
                stddev: 0.0,
                min: 1,
            },
        );
        let n = LoopNest::new(root, vec![0.0, 1.0], 0.0).unwrap();
        assert_eq!(resolve_bounds(&n, &BTreeMap::new(), &mut rng(9)).unwrap(), vec![50]);
    }

    #[test]
    fn data_dependent_draws_respect_min() {
        let root = Loop::new(
            "d",
            BoundSpec::DataDependent {
                mean: 3.0,
                stddev: 20.0,
                min: 2,
            },
        );
        let n = LoopNest::new(root, vec![0.0, 1.0], 0.0).unwrap();
        let mut r = rng(4);
        for _ in 0..500 {
            assert!(resolve_bounds(&n, &BTreeMap::new(), &mut r).unwrap()[0] >= 2);
        }
    }

    #[test]
    fn ground_truth_matches_hand_evaluated_polynomial() {
        // 10 + 2*4 + 1*4*5 = 38
        let n = nest2(vec![10.0, 2.0, 1.0], 0.0);
        assert_eq!(ground_truth_misses(&n, &[4, 5], &mut rng(0)).unwrap(), 38.0);
        let n = nest2(vec![3.0, 5.0, 7.0], 0.0);
        assert_eq!(ground_truth_misses(&n, &[1, 1], &mut rng(0)).unwrap(), 15.0);
        assert!(matches!(
            ground_truth_misses(&n, &[1], &mut rng(0)),
            Err(WorkloadError::DepthMismatch { .. })
        ));
    }

    #[test]
    fn noise_stays_within_fraction() {
        let n = nest2(vec![10.0, 2.0, 1.0], 0.1);
        for seed in 0..1000 {
            let v = ground_truth_misses(&n, &[4, 5], &mut rng(seed)).unwrap();
            assert!((0.9 * 38.0..=1.1 * 38.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn coefficient_count_must_match_depth() {
        let root = Loop::new("x", BoundSpec::Constant(2));
        assert!(matches!(
            LoopNest::new(root, vec![1.0], 0.0),
            Err(WorkloadError::InvalidNest { .. })
        ));
    }

    #[test]
    fn calls_in_outer_levels_are_rejected() {
        let inner = Loop::new("b", BoundSpec::Constant(2));
        let outer = Loop::new("a", BoundSpec::Constant(2)).with_body(vec![
            Stmt::Call(CallSite {
                callee: "g".into(),
                args: vec![],
            }),
            Stmt::Loop(inner),
        ]);
        let prog = Program {
            name: "p".into(),
            entry: "main".into(),
            params: BTreeMap::new(),
            libraries: vec![],
            functions: BTreeMap::from([
                (
                    "main".to_string(),
                    Function {
                        name: "main".into(),
                        body: vec![Stmt::Nest(LoopNest::new(outer, vec![0.0; 3], 0.0).unwrap())],
                    },
                ),
                (
                    "g".to_string(),
                    Function {
                        name: "g".into(),
                        body: vec![Stmt::Work(1)],
                    },
                ),
            ]),
        };
        assert!(matches!(prog.validate(), Err(WorkloadError::Unsupported { .. })));
    }

    proptest::proptest! {
        #[test]
        fn normalization_preserves_trip_count(s in -200i64..200, n in -200i64..200, d in -13i64..13) {
            proptest::prop_assume!(d != 0);
            let c = Loop::new("c", BoundSpec::Constant(0)).with_header(s, d);
            // raw loop with a symbolic bound resolved to n
            let sym = Loop::new("s", BoundSpec::Param("N".into())).with_header(s, d);
            let expected = direct_count(s, n, d);
            proptest::prop_assert_eq!(sym.trip_count(n).unwrap(), expected);
            let norm = normalize_loop(&sym).unwrap();
            proptest::prop_assert!(norm.is_normalized());
            proptest::prop_assert_eq!(norm.trip_count(n).unwrap(), expected);
            if n >= 0 {
                let cn = Loop { bound: BoundSpec::Constant(n as u64), ..c };
                let folded = normalize_loop(&cn).unwrap();
                proptest::prop_assert_eq!(folded.bound, BoundSpec::Constant(expected));
            }
        }

        #[test]
        fn resolve_is_pure_in_seed(seed in 0u64..10_000) {
            let root = Loop::new("d", BoundSpec::DataDependent { mean: 40.0, stddev: 9.0, min: 1 })
                .with_body(vec![Stmt::Loop(Loop::new("e", BoundSpec::Param("M".into())))]);
            let n = LoopNest::new(root, vec![1.0, 1.0, 1.0], 0.0).unwrap();
            let p = BTreeMap::from([("M".to_string(), 7)]);
            proptest::prop_assert_eq!(
                resolve_bounds(&n, &p, &mut rng(seed)).unwrap(),
                resolve_bounds(&n, &p, &mut rng(seed)).unwrap()
            );
        }
    }
}
