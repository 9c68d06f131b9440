//! Training: fit a model per beacon region from grid runs, and derive `k` from
//! repeated runs of every nest at the largest training bounds.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::catalog::{Catalog, ProgramSpec};
use crate::beacon::{run_region, BeaconError, BeaconSite, Instrumented};
use crate::model::{compute_k, fit, BeaconKind, MissModel, ModelError, ModelSet, TrainingSample};
use crate::workload::{ground_truth_misses, resolve_bounds, BoundSpec, LoopId};

/// Repeated runs per nest when measuring dispersion.
pub const K_REPEATS: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{program}/{loop_id}: degenerate fit, {term} is collinear with lower-order terms; vary the bounds in that term across training runs or fold a constant level into its neighbour")]
    Degenerate { program: String, loop_id: LoopId, term: String },
    #[error("{program}: training grid for `{param}` is empty")]
    EmptyGrid { program: String, param: String },
    #[error("{program}/{loop_id}: {source}")]
    Model { program: String, loop_id: LoopId, source: ModelError },
    #[error(transparent)]
    Dispersion(ModelError),
    #[error(transparent)]
    Beacon(#[from] BeaconError),
}

/// Models for a whole catalog, all sharing one `k`.
#[derive(Clone, Debug)]
pub struct TrainedCatalog {
    pub k: f64,
    /// Dispersion of each nest, keyed by program then loop id.
    pub dispersion: BTreeMap<String, BTreeMap<LoopId, f64>>,
    pub sets: BTreeMap<String, Arc<ModelSet>>,
}

/// Parameters a region's bounds depend on.
fn region_params(inst: &Instrumented, site: &BeaconSite) -> BTreeSet<String> {
    let ids: BTreeSet<&LoopId> = site.levels.iter().map(|l| &l.loop_id).collect();
    let mut out = BTreeSet::new();
    for (_, nest) in inst.program.nests() {
        for l in nest.chain() {
            if ids.contains(&l.id) {
                if let BoundSpec::Param(p) = &l.bound {
                    out.insert(p.clone());
                }
            }
        }
    }
    out
}

/// Cartesian product of the grid restricted to `names`; other params stay at defaults.
fn grid_points(spec: &ProgramSpec, names: &BTreeSet<String>) -> Result<Vec<BTreeMap<String, u64>>, TrainError> {
    let mut points = vec![spec.mid_params()];
    for name in names {
        let Some(values) = spec.grid.get(name) else { continue };
        if values.is_empty() {
            return Err(TrainError::EmptyGrid {
                program: spec.name().to_string(),
                param: name.clone(),
            });
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(name.clone(), *v);
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

fn train_site<R: Rng + ?Sized>(spec: &ProgramSpec, site: &BeaconSite, k: f64, rng: &mut R) -> Result<MissModel, TrainError> {
    let inst = &spec.instrumented;
    let names = region_params(inst, site);
    let points = grid_points(spec, &names)?;
    // Top up repeats so a short grid still has enough samples for the fit.
    let repeats = spec.repeats.max(1).max((site.depth() + 2).div_ceil(points.len()));
    let mut samples = Vec::new();
    for params in points {
        for _ in 0..repeats {
            let r = run_region(inst, site, &params, rng)?;
            samples.push(TrainingSample {
                loop_id: site.loop_id.clone(),
                bounds: r.run.realized,
                observed_misses: r.misses,
            });
        }
    }
    let coeffs = fit(&samples).map_err(|e| match e {
        ModelError::DegenerateFit { term } => TrainError::Degenerate {
            program: spec.name().to_string(),
            loop_id: site.loop_id.clone(),
            term,
        },
        source => TrainError::Model {
            program: spec.name().to_string(),
            loop_id: site.loop_id.clone(),
            source,
        },
    })?;
    let expected_bounds = match site.kind {
        BeaconKind::Precise => Vec::new(),
        BeaconKind::Expected => {
            let n = samples.len() as f64;
            (0..site.depth())
                .map(|i| samples.iter().map(|s| s.bounds[i]).sum::<f64>() / n)
                .collect()
        }
    };
    Ok(MissModel {
        loop_id: site.loop_id.clone(),
        coeffs,
        k,
        kind: site.kind,
        expected_bounds,
    })
}

/// Dispersion of every nest of a program at its largest training bounds.
pub fn program_dispersion<R: Rng + ?Sized>(spec: &ProgramSpec, rng: &mut R) -> Result<BTreeMap<LoopId, Vec<f64>>, TrainError> {
    let mut params = spec.mid_params();
    for (name, values) in &spec.grid {
        if let Some(max) = values.iter().max() {
            params.insert(name.clone(), *max);
        }
    }
    let mut runs = BTreeMap::new();
    for (_, nest) in spec.program().nests() {
        let bounds = resolve_bounds(nest, &params, rng).map_err(BeaconError::from)?;
        let r = (0..K_REPEATS)
            .map(|_| ground_truth_misses(nest, &bounds, rng))
            .collect::<Result<Vec<_>, _>>()
            .map_err(BeaconError::from)?;
        runs.insert(nest.id().clone(), r);
    }
    Ok(runs)
}

/// Fits every region of one program with a given `k`.
pub fn train_program<R: Rng + ?Sized>(spec: &ProgramSpec, k: f64, rng: &mut R) -> Result<ModelSet, TrainError> {
    let mut models = BTreeMap::new();
    for site in &spec.instrumented.sites {
        models.insert(site.loop_id.clone(), train_site(spec, site, k, rng)?);
    }
    Ok(ModelSet {
        program: spec.name().to_string(),
        k,
        models,
    })
}

/// Trains every program of the catalog with a shared `k`. Deterministic in `seed`.
pub fn train_catalog(catalog: &Catalog, seed: u64) -> Result<TrainedCatalog, TrainError> {
    let mut dispersion = BTreeMap::new();
    let mut k = 0.0_f64;
    for (i, spec) in catalog.programs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x6b00 + i as u64));
        let runs = program_dispersion(spec, &mut rng)?;
        k = k.max(compute_k(&runs).map_err(TrainError::Dispersion)?);
        let per: BTreeMap<LoopId, f64> = runs
            .iter()
            .map(|(id, r)| crate::model::dispersion(id, r).map(|d| (id.clone(), d)))
            .collect::<Result<_, _>>()
            .map_err(TrainError::Dispersion)?;
        dispersion.insert(spec.name().to_string(), per);
    }
    let mut sets = BTreeMap::new();
    for (i, spec) in catalog.programs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x7700 + i as u64));
        sets.insert(spec.name().to_string(), Arc::new(train_program(spec, k, &mut rng)?));
    }
    Ok(TrainedCatalog { k, dispersion, sets })
}

/// Writes `<program>.models.toml` for every trained program.
pub fn save_models(trained: &TrainedCatalog, dir: &Path) -> Result<Vec<PathBuf>, ModelError> {
    std::fs::create_dir_all(dir).map_err(|e| ModelError::File(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    for (name, set) in &trained.sets {
        let path = dir.join(format!("{name}.models.toml"));
        set.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Loads previously saved models for every program of `catalog`.
///
/// Dispersions are not stored in model files, so the result has none.
pub fn load_models(catalog: &Catalog, dir: &Path) -> Result<TrainedCatalog, ModelError> {
    let mut sets = BTreeMap::new();
    let mut k = 0.0_f64;
    for spec in &catalog.programs {
        let set = ModelSet::load(&dir.join(format!("{}.models.toml", spec.name())))?;
        if set.program != spec.name() {
            return Err(ModelError::File(format!("model file for {} names program {}", spec.name(), set.program)));
        }
        k = k.max(set.k);
        sets.insert(spec.name().to_string(), Arc::new(set));
    }
    Ok(TrainedCatalog {
        k,
        dispersion: BTreeMap::new(),
        sets,
    })
}

/// One held-out region execution compared against its model.
#[derive(Clone, Debug, PartialEq)]
pub struct Holdout {
    pub program: String,
    pub loop_id: LoopId,
    pub kind: BeaconKind,
    pub predicted: f64,
    pub upper: f64,
    pub observed: f64,
}

impl Holdout {
    /// `1 - |pred - obs| / obs`, floored at zero.
    pub fn accuracy(&self) -> f64 {
        accuracy(self.predicted, self.observed)
    }
}

pub fn accuracy(predicted: f64, observed: f64) -> f64 {
    if observed <= 0.0 {
        return if predicted <= 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - (predicted - observed).abs() / observed).max(0.0)
}

/// Runs every region at `runs` random parameter draws from the program's ranges.
pub fn holdout<R: Rng + ?Sized>(spec: &ProgramSpec, set: &ModelSet, runs: usize, rng: &mut R) -> Result<Vec<Holdout>, TrainError> {
    let mut out = Vec::new();
    for _ in 0..runs {
        let params = draw_params(spec, rng);
        for site in &spec.instrumented.sites {
            let Some(m) = set.get(&site.loop_id) else { continue };
            let r = run_region(&spec.instrumented, site, &params, rng)?;
            let wrap = |source| TrainError::Model {
                program: spec.name().to_string(),
                loop_id: site.loop_id.clone(),
                source,
            };
            out.push(Holdout {
                program: spec.name().to_string(),
                loop_id: site.loop_id.clone(),
                kind: m.kind,
                predicted: m.predict_visible(&r.run.visible).map_err(wrap)?,
                upper: m.predict_upper_visible(&r.run.visible).map_err(wrap)?,
                observed: r.misses,
            });
        }
    }
    Ok(out)
}

/// Uniform integer draw for each ranged parameter.
pub fn draw_params<R: Rng + ?Sized>(spec: &ProgramSpec, rng: &mut R) -> BTreeMap<String, u64> {
    let mut p = spec.program().params.clone();
    for (k, (lo, hi)) in &spec.ranges {
        p.insert(k.clone(), rng.random_range(*lo..=*hi));
    }
    p
}
