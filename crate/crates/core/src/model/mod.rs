//! Per-nest cache-miss models.
//!
//! A model predicts the misses of one beacon region from its loop bounds using
//! prefix-product features `[1, lb1, lb1*lb2, ...]`, fitted by ordinary least
//! squares. The uncertainty factor `k` scales predictions into an upper bound.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::LoopId;

/// Relative diagonal magnitude below which the design matrix is treated as singular.
const PIVOT_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("need at least {needed} samples to fit depth {depth}, got {got}")]
    InsufficientSamples { depth: usize, needed: usize, got: usize },
    #[error("samples mix nest depths {0} and {1}")]
    MixedDepth(usize, usize),
    #[error("degenerate fit: term {term} is collinear with earlier terms")]
    DegenerateFit { term: String },
    #[error("loop {0}: mean misses of zero, cannot compute dispersion")]
    ZeroMean(LoopId),
    #[error("loop {0}: fewer than two repeated runs")]
    TooFewRepeats(LoopId),
    #[error("expected {expected} bounds, got {got}")]
    BoundsLength { expected: usize, got: usize },
    #[error("model file: {0}")]
    File(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub loop_id: LoopId,
    pub bounds: Vec<f64>,
    pub observed_misses: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BeaconKind {
    Precise,
    Expected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissModel {
    pub loop_id: LoopId,
    pub coeffs: Vec<f64>,
    pub k: f64,
    pub kind: BeaconKind,
    /// Bounds substituted for values unknown at the beacon; empty for precise models.
    #[serde(default)]
    pub expected_bounds: Vec<f64>,
}

/// `[1, lb1, lb1*lb2, ..., lb1*...*lbn]`
pub fn features(bounds: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(bounds.len() + 1);
    let mut prefix = 1.0;
    out.push(prefix);
    for b in bounds {
        prefix *= b;
        out.push(prefix);
    }
    out
}

fn term_name(j: usize) -> String {
    match j {
        0 => "constant".to_string(),
        _ => (1..=j)
            .map(|i| format!("lb{i}"))
            .collect::<Vec<_>>()
            .join("*"),
    }
}

/// Least-squares coefficients for samples of a single nest.
#[allow(clippy::needless_range_loop)]
pub fn fit(samples: &[TrainingSample]) -> Result<Vec<f64>, ModelError> {
    let depth = samples.first().map(|s| s.bounds.len()).unwrap_or(0);
    if let Some(s) = samples.iter().find(|s| s.bounds.len() != depth) {
        return Err(ModelError::MixedDepth(depth, s.bounds.len()));
    }
    let p = depth + 1;
    if samples.len() < depth + 2 {
        return Err(ModelError::InsufficientSamples {
            depth,
            needed: depth + 2,
            got: samples.len(),
        });
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| features(&s.bounds)).collect();
    // Column scaling keeps the normal equations well conditioned.
    let scale: Vec<f64> = (0..p)
        .map(|j| {
            let norm = rows.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt();
            if norm > 0.0 {
                1.0 / norm
            } else {
                1.0
            }
        })
        .collect();
    let m = rows.len();
    let mut a: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&scale).map(|(x, s)| x * s).collect())
        .collect();
    let mut y: Vec<f64> = samples.iter().map(|s| s.observed_misses).collect();
    // Householder QR, column by column; a vanishing diagonal means the column
    // lies in the span of the earlier ones.
    let mut diag = vec![0.0; p];
    for j in 0..p {
        let norm = (j..m).map(|i| a[i][j] * a[i][j]).sum::<f64>().sqrt();
        if norm <= PIVOT_TOL {
            return Err(ModelError::DegenerateFit { term: term_name(j) });
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| a[i][j]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for c in j..p {
                let dot: f64 = (j..m).map(|i| v[i - j] * a[i][c]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in j..m {
                    a[i][c] -= f * v[i - j];
                }
            }
            let dot: f64 = (j..m).map(|i| v[i - j] * y[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                y[i] -= f * v[i - j];
            }
        }
        diag[j] = a[j][j];
    }
    let max_diag = diag.iter().fold(0.0_f64, |acc, d| acc.max(d.abs()));
    if let Some(j) = diag.iter().position(|d| d.abs() <= PIVOT_TOL * max_diag) {
        return Err(ModelError::DegenerateFit { term: term_name(j) });
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|j| a[i][j] * x[j]).sum();
        x[i] = (y[i] - s) / a[i][i];
    }
    Ok(x.iter().zip(&scale).map(|(xi, s)| xi * s).collect())
}

/// Coefficient of variation of repeated runs at fixed bounds.
pub fn dispersion(loop_id: &LoopId, runs: &[f64]) -> Result<f64, ModelError> {
    if runs.len() < 2 {
        return Err(ModelError::TooFewRepeats(loop_id.clone()));
    }
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(ModelError::ZeroMean(loop_id.clone()));
    }
    let var = runs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean.abs())
}

/// The largest dispersion over all loops of the trained programs.
pub fn compute_k(runs: &BTreeMap<LoopId, Vec<f64>>) -> Result<f64, ModelError> {
    runs.iter()
        .map(|(id, r)| dispersion(id, r))
        .try_fold(0.0_f64, |acc, d| d.map(|d| acc.max(d)))
}

impl MissModel {
    pub fn depth(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn predict(&self, bounds: &[f64]) -> Result<f64, ModelError> {
        if bounds.len() != self.depth() {
            return Err(ModelError::BoundsLength {
                expected: self.depth(),
                got: bounds.len(),
            });
        }
        let f = features(bounds);
        let v: f64 = f.iter().zip(&self.coeffs).map(|(x, c)| x * c).sum();
        Ok(v.max(0.0))
    }

    pub fn predict_upper(&self, bounds: &[f64]) -> Result<f64, ModelError> {
        Ok((1.0 + self.k) * self.predict(bounds)?)
    }

    /// Fills bounds the beacon cannot see from `expected_bounds`.
    pub fn complete_bounds(&self, visible: &[Option<f64>]) -> Result<Vec<f64>, ModelError> {
        if visible.len() != self.depth() {
            return Err(ModelError::BoundsLength {
                expected: self.depth(),
                got: visible.len(),
            });
        }
        visible
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(b) => Ok(*b),
                None => self.expected_bounds.get(i).copied().ok_or(ModelError::BoundsLength {
                    expected: self.depth(),
                    got: self.expected_bounds.len(),
                }),
            })
            .collect()
    }

    pub fn predict_visible(&self, visible: &[Option<f64>]) -> Result<f64, ModelError> {
        self.predict(&self.complete_bounds(visible)?)
    }

    pub fn predict_upper_visible(&self, visible: &[Option<f64>]) -> Result<f64, ModelError> {
        self.predict_upper(&self.complete_bounds(visible)?)
    }
}

/// Models for every beacon of one program, sharing the training-set `k`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSet {
    pub program: String,
    pub k: f64,
    pub models: BTreeMap<LoopId, MissModel>,
}

impl ModelSet {
    pub fn get(&self, id: &LoopId) -> Option<&MissModel> {
        self.models.get(id)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model sets always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        toml::from_str(text).map_err(|e| ModelError::File(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_toml()).map_err(|e| ModelError::File(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::File(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}
