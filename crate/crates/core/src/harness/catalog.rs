//! Built-in program suites.
//!
//! `accurate` pairs crypto-style victims with co-runners whose beacons see
//! (almost) every bound. `degraded` swaps the co-runners for programs whose
//! callee sizes are hidden from their beacons and vary per process, which
//! lowers model accuracy. `stress` adds a long texture-synthesis style victim.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::beacon::{instrument, Instrumented};
use crate::workload::{BoundSpec, CallSite, Function, Loop, LoopNest, Program, Stmt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Accurate,
    Degraded,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::Accurate => "accurate",
            Regime::Degraded => "degraded",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Victim,
    CoRunner,
    Stress,
}

/// A program plus how it is trained and how processes pick their parameters.
#[derive(Clone, Debug)]
pub struct ProgramSpec {
    pub instrumented: Arc<Instrumented>,
    pub role: Role,
    /// Inclusive per-process parameter ranges.
    pub ranges: BTreeMap<String, (u64, u64)>,
    /// Training values per parameter.
    pub grid: BTreeMap<String, Vec<u64>>,
    pub repeats: usize,
}

impl ProgramSpec {
    pub fn program(&self) -> &Program {
        &self.instrumented.program
    }

    pub fn name(&self) -> &str {
        &self.instrumented.program.name
    }

    /// Midpoint parameters.
    pub fn mid_params(&self) -> BTreeMap<String, u64> {
        let mut p = self.program().params.clone();
        for (k, (lo, hi)) in &self.ranges {
            p.insert(k.clone(), (lo + hi) / 2);
        }
        p
    }
}

#[derive(Clone, Debug)]
pub struct Catalog {
    pub name: String,
    pub programs: Vec<ProgramSpec>,
}

impl Catalog {
    pub fn by_role(&self, role: Role) -> Vec<&ProgramSpec> {
        self.programs.iter().filter(|p| p.role == role).collect()
    }

    pub fn get(&self, name: &str) -> Option<&ProgramSpec> {
        self.programs.iter().find(|p| p.name() == name)
    }
}

fn dd(mean: f64, stddev: f64) -> BoundSpec {
    BoundSpec::DataDependent { mean, stddev, min: 1 }
}

fn param(p: &str) -> BoundSpec {
    BoundSpec::Param(p.to_string())
}

fn call(callee: &str, args: &[&str]) -> Stmt {
    Stmt::Call(CallSite {
        callee: callee.to_string(),
        args: args.iter().map(|s| s.to_string()).collect(),
    })
}

/// A rectangular nest; `levels` are (bound, work per iteration) from outermost in.
fn nest(id: &str, levels: Vec<(BoundSpec, u64)>, innermost: Vec<Stmt>, coeffs: Vec<f64>, noise: f64) -> Stmt {
    let n = levels.len();
    let mut body = innermost;
    let mut built = None;
    for (i, (bound, work)) in levels.into_iter().enumerate().rev() {
        let lid = if i == 0 { id.to_string() } else { format!("{id}.{i}") };
        let mut stmts = vec![Stmt::Work(work)];
        stmts.append(&mut body);
        let l = Loop::new(lid, bound).with_body(stmts);
        if i > 0 {
            body = vec![Stmt::Loop(l)];
        } else {
            built = Some(l);
        }
    }
    debug_assert_eq!(coeffs.len(), n + 1);
    Stmt::Nest(LoopNest::new(built.expect("at least one level"), coeffs, noise).expect("valid catalog nest"))
}

fn program(name: &str, libs: &[&str], functions: Vec<(&str, Vec<Stmt>)>) -> Program {
    Program {
        name: name.to_string(),
        entry: "main".to_string(),
        params: BTreeMap::new(),
        libraries: libs.iter().map(|s| s.to_string()).collect(),
        functions: functions
            .into_iter()
            .map(|(n, body)| {
                (
                    n.to_string(),
                    Function {
                        name: n.to_string(),
                        body,
                    },
                )
            })
            .collect(),
    }
}

fn spec(prog: Program, role: Role, ranges: &[(&str, u64, u64)], grid_points: usize, repeats: usize) -> ProgramSpec {
    let mut prog = prog;
    let ranges: BTreeMap<String, (u64, u64)> = ranges.iter().map(|(k, lo, hi)| (k.to_string(), (*lo, *hi))).collect();
    for (k, (lo, hi)) in &ranges {
        prog.params.insert(k.clone(), (lo + hi) / 2);
    }
    let grid = ranges
        .iter()
        .map(|(k, (lo, hi))| {
            let pts: Vec<u64> = (0..grid_points)
                .map(|i| lo + (hi - lo) * i as u64 / (grid_points as u64 - 1).max(1))
                .collect();
            (k.clone(), pts)
        })
        .collect();
    ProgramSpec {
        instrumented: Arc::new(instrument(&prog).expect("catalog programs are well formed")),
        role,
        ranges,
        grid,
        repeats,
    }
}

fn victims() -> Vec<ProgramSpec> {
    let rsa = program(
        "rsa_sign",
        &["libcrypto"],
        vec![(
            "main",
            vec![
                Stmt::Work(400_000),
                nest(
                    "rsa.sign",
                    vec![(param("msgs"), 20_000), (param("limbs"), 240_000)],
                    vec![],
                    vec![3000.0, 200.0, 72.0],
                    0.04,
                ),
                Stmt::Work(200_000),
            ],
        )],
    );
    let aes = program(
        "aes_cbc",
        &["libcrypto"],
        vec![(
            "main",
            vec![
                Stmt::Work(300_000),
                nest(
                    "aes.stream",
                    vec![(param("chunks"), 5_000), (param("blocks"), 2_000), (param("rounds"), 10_000)],
                    vec![],
                    vec![2000.0, 100.0, 10.0, 3.0],
                    0.04,
                ),
            ],
        )],
    );
    let ec = program(
        "ecdsa_verify",
        &["libcrypto"],
        vec![(
            "main",
            vec![
                Stmt::Work(500_000),
                nest(
                    "ec.verify",
                    vec![(param("sigs"), 8_000), (param("bits"), 10_000)],
                    vec![],
                    vec![1000.0, 50.0, 3.0],
                    0.04,
                ),
                Stmt::Work(100_000),
            ],
        )],
    );
    vec![
        spec(rsa, Role::Victim, &[("msgs", 30, 50), ("limbs", 96, 160)], 3, 2),
        spec(aes, Role::Victim, &[("chunks", 20, 40), ("blocks", 200, 400), ("rounds", 10, 14)], 3, 2),
        spec(ec, Role::Victim, &[("sigs", 300, 500), ("bits", 224, 384)], 3, 2),
    ]
}

fn accurate_corunners() -> Vec<ProgramSpec> {
    let disparity = program(
        "disparity",
        &["libsdcommon"],
        vec![
            (
                "main",
                vec![
                    Stmt::Work(200_000),
                    nest(
                        "disp.cost",
                        vec![(param("rows"), 4_000), (param("cols"), 2_000)],
                        vec![],
                        vec![5000.0, 100.0, 1.6],
                        0.04,
                    ),
                    nest(
                        "disp.filter",
                        vec![(param("rows"), 5_000)],
                        vec![call("box_filter", &[])],
                        vec![800.0, 30.0],
                        0.04,
                    ),
                    nest(
                        "disp.agg",
                        vec![(param("rows"), 3_000), (param("cols"), 1_500)],
                        vec![],
                        vec![2000.0, 50.0, 1.0],
                        0.04,
                    ),
                ],
            ),
            (
                "box_filter",
                vec![
                    Stmt::Work(2_000),
                    nest("box.win", vec![(dd(600.0, 120.0), 3_000)], vec![], vec![40.0, 2.0], 0.2),
                ],
            ),
        ],
    );
    let tracking = program(
        "tracking",
        &["libsdcommon"],
        vec![
            (
                "main",
                vec![
                    Stmt::Work(150_000),
                    nest(
                        "trk.grad",
                        vec![(param("frames"), 10_000), (param("pixels"), 800)],
                        vec![],
                        vec![1000.0, 300.0, 0.6],
                        0.04,
                    ),
                    nest(
                        "trk.feat",
                        vec![(param("frames"), 20_000)],
                        vec![call("feature", &["feat"])],
                        vec![500.0, 40.0],
                        0.04,
                    ),
                ],
            ),
            (
                "feature",
                vec![nest(
                    "feat.iter",
                    vec![(param("feat"), 2_000), (dd(40.0, 8.0), 1_500)],
                    vec![],
                    vec![20.0, 5.0, 1.2],
                    0.2,
                )],
            ),
        ],
    );
    let segment = program(
        "segment",
        &["libsdcommon"],
        vec![(
            "main",
            vec![
                Stmt::Work(100_000),
                nest(
                    "seg.graph",
                    vec![(param("nodes"), 6_000), (param("edges"), 3_000)],
                    vec![],
                    vec![500.0, 10.0, 2.4],
                    0.04,
                ),
                nest(
                    "seg.label",
                    vec![(param("iters"), 10_000), (param("nodes"), 4_000)],
                    vec![],
                    vec![300.0, 50.0, 2.0],
                    0.04,
                ),
            ],
        )],
    );
    let sift = program(
        "sift",
        &["libsdcommon"],
        vec![(
            "main",
            vec![
                Stmt::Work(250_000),
                nest(
                    "sift.octave",
                    vec![(param("octaves"), 50_000), (param("scales"), 20_000), (param("pixels"), 600)],
                    vec![],
                    vec![1000.0, 500.0, 100.0, 0.5],
                    0.04,
                ),
                nest(
                    "sift.desc",
                    vec![(param("keys"), 12_000)],
                    vec![],
                    vec![400.0, 9.0],
                    0.04,
                ),
            ],
        )],
    );
    vec![
        spec(disparity, Role::CoRunner, &[("rows", 200, 400), ("cols", 200, 400)], 3, 2),
        spec(tracking, Role::CoRunner, &[("frames", 20, 40), ("pixels", 8_000, 16_000), ("feat", 100, 200)], 3, 2),
        spec(segment, Role::CoRunner, &[("nodes", 3_000, 6_000), ("edges", 20, 40), ("iters", 10, 20)], 3, 2),
        spec(sift, Role::CoRunner, &[("octaves", 3, 6), ("scales", 4, 8), ("pixels", 20_000, 40_000), ("keys", 10_000, 30_000)], 3, 2),
    ]
}

fn degraded_corunners() -> Vec<ProgramSpec> {
    // Callee sizes are not forwarded, so beacons fall back to training means.
    let stitch = program(
        "stitch",
        &["libsdcommon"],
        vec![
            (
                "main",
                vec![
                    Stmt::Work(100_000),
                    nest("st.frames", vec![(param("frames"), 20_000)], vec![call("warp", &["width"])], vec![300.0, 50.0], 0.05),
                    nest("st.blend", vec![(param("frames"), 30_000)], vec![call("blend", &[])], vec![200.0, 20.0], 0.05),
                ],
            ),
            (
                "warp",
                vec![nest(
                    "warp.rows",
                    vec![(param("height"), 500), (param("width"), 400)],
                    vec![],
                    vec![10.0, 4.0, 0.3],
                    0.1,
                )],
            ),
            (
                "blend",
                vec![nest("blend.px", vec![(param("height"), 40_000)], vec![], vec![50.0, 30.0], 0.1)],
            ),
        ],
    );
    let mser = program(
        "mser",
        &["libsdcommon"],
        vec![
            (
                "main",
                vec![
                    Stmt::Work(150_000),
                    nest("mser.levels", vec![(param("levels"), 10_000)], vec![call("regions", &[])], vec![100.0, 30.0], 0.05),
                ],
            ),
            (
                "regions",
                vec![nest(
                    "reg.grow",
                    vec![(param("area"), 1_200)],
                    vec![],
                    vec![50.0, 0.6],
                    0.1,
                )],
            ),
        ],
    );
    let svm = program(
        "svm",
        &["libsdcommon"],
        vec![
            (
                "main",
                vec![
                    Stmt::Work(120_000),
                    nest("svm.epochs", vec![(param("epochs"), 5_000)], vec![call("kernel", &["dims"])], vec![200.0, 10.0], 0.05),
                    nest("svm.shuffle", vec![(param("epochs"), 2_000)], vec![call("shuffle", &[])], vec![100.0, 5.0], 0.05),
                ],
            ),
            (
                "kernel",
                vec![nest(
                    "kern.rows",
                    vec![(param("samples"), 800), (param("dims"), 900)],
                    vec![],
                    vec![30.0, 6.0, 0.5],
                    0.1,
                )],
            ),
            (
                "shuffle",
                vec![nest("shuf.swap", vec![(dd(500.0, 50.0), 2_000)], vec![], vec![10.0, 2.0], 0.5)],
            ),
        ],
    );
    let localize = program(
        "localize",
        &["libsdcommon"],
        vec![
            (
                "main",
                vec![
                    Stmt::Work(200_000),
                    nest("loc.particles", vec![(param("steps"), 10_000)], vec![call("weigh", &["particles"])], vec![100.0, 20.0], 0.05),
                ],
            ),
            (
                "weigh",
                vec![nest(
                    "weigh.obs",
                    vec![(param("particles"), 500), (param("beams"), 1_000)],
                    vec![],
                    vec![10.0, 1.0, 0.15],
                    0.1,
                )],
            ),
        ],
    );
    vec![
        spec(stitch, Role::CoRunner, &[("frames", 20, 40), ("width", 300, 500), ("height", 75, 125)], 3, 1),
        spec(mser, Role::CoRunner, &[("levels", 150, 250), ("area", 1_500, 2_500)], 3, 1),
        spec(svm, Role::CoRunner, &[("epochs", 20, 30), ("samples", 150, 250), ("dims", 60, 100)], 3, 1),
        spec(localize, Role::CoRunner, &[("steps", 60, 100), ("particles", 300, 500), ("beams", 45, 75)], 3, 1),
    ]
}

fn stress() -> ProgramSpec {
    // Several rounds of the same three phases, each round its own set of nests.
    let mut main = vec![Stmt::Work(300_000)];
    for r in 0..4 {
        main.push(nest(
            &format!("tex.r{r}.pyramid"),
            vec![(param("levels"), 5_000), (param("pixels"), 900)],
            vec![],
            vec![2000.0, 100.0, 0.5],
            0.04,
        ));
        main.push(nest(
            &format!("tex.r{r}.search"),
            vec![(param("passes"), 20_000)],
            vec![call("match_patch", &["patch", "cands"])],
            vec![400.0, 40.0],
            0.04,
        ));
        main.push(nest(
            &format!("tex.r{r}.blend"),
            vec![(param("levels"), 6_000), (param("pixels"), 1_000)],
            vec![],
            vec![1000.0, 80.0, 0.5],
            0.04,
        ));
    }
    let texture = program(
        "texture_synthesis",
        &["libsdcommon", "libtexture"],
        vec![
            ("main", main),
            (
                "match_patch",
                vec![nest(
                    "patch.scan",
                    vec![(param("patch"), 4_000), (param("cands"), 1_200)],
                    vec![],
                    vec![50.0, 10.0, 1.0],
                    0.04,
                )],
            ),
        ],
    );
    spec(
        texture,
        Role::Stress,
        &[("levels", 40, 60), ("pixels", 10_000, 14_000), ("passes", 20, 30), ("patch", 100, 140), ("cands", 100, 140)],
        3,
        2,
    )
}

/// The program suite for a regime, with the stress program appended.
pub fn catalog(regime: Regime) -> Catalog {
    let mut programs = victims();
    programs.extend(match regime {
        Regime::Accurate => accurate_corunners(),
        Regime::Degraded => degraded_corunners(),
    });
    programs.push(stress());
    Catalog {
        name: regime.name().to_string(),
        programs,
    }
}
