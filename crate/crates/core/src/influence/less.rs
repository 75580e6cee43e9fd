//! Projected-gradient similarity scores.
//!
//! Per-sample gradients at a handful of training checkpoints are pushed
//! through one fixed random projection `P` (a "gradient datastore"). Test
//! mode averages, over checkpoints, the cosine between `P J_j` and the
//! projected mean test gradient. Self mode averages `|P J_j|^2` divided by
//! its mean over the training set at that checkpoint.
//!
//! Full per-sample gradients are projected directly; there is no low-rank
//! adapter factorisation. When a snapshot carries an Adam second-moment
//! estimate and `adam_normalize` is set, gradients are divided elementwise
//! by `sqrt(v) + eps` before projection.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{InfluenceScores, Method, Mode, ScoreMetadata};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{dot, norm2, ModelParams};
use crate::trainer::Snapshot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// Entries `N(0, 1/m)`.
    Gaussian,
    /// Entries `+-1/sqrt(m)`.
    Rademacher,
    /// Orthonormal columns when `m >= K` (an isometry); otherwise
    /// orthonormal rows scaled by `sqrt(K/m)`.
    Orthonormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LessConfig {
    pub projection_dim: usize,
    pub projection: ProjectionKind,
    pub seed: u64,
    pub adam_normalize: bool,
    pub adam_eps: f64,
}

impl Default for LessConfig {
    fn default() -> Self {
        Self {
            projection_dim: 512,
            projection: ProjectionKind::Gaussian,
            seed: 0,
            adam_normalize: true,
            adam_eps: 1e-8,
        }
    }
}

/// A seeded `m x K` projection matrix.
#[derive(Debug, Clone)]
pub struct Projection {
    matrix: DMatrix<f64>,
}

impl Projection {
    pub fn new(kind: ProjectionKind, out_dim: usize, in_dim: usize, seed: u64) -> Result<Self> {
        if out_dim == 0 || in_dim == 0 {
            return Err(Error::param("projection dimensions must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = out_dim as f64;
        let matrix = match kind {
            ProjectionKind::Gaussian => DMatrix::from_fn(out_dim, in_dim, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z / m.sqrt()
            }),
            ProjectionKind::Rademacher => DMatrix::from_fn(out_dim, in_dim, |_, _| {
                let sign = if rand::Rng::random::<bool>(&mut rng) {
                    1.0
                } else {
                    -1.0
                };
                sign / m.sqrt()
            }),
            ProjectionKind::Orthonormal => {
                let (rows, cols) = (out_dim.max(in_dim), out_dim.min(in_dim));
                let g = DMatrix::from_fn(rows, cols, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                });
                let q = g.qr().q();
                if out_dim >= in_dim {
                    q
                } else {
                    q.transpose() * (in_dim as f64 / m).sqrt()
                }
            }
        };
        Ok(Self { matrix })
    }

    pub fn out_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.in_dim());
        (0..self.out_dim())
            .map(|r| self.matrix.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Picks up to `count` snapshots evenly spaced from index `from` to the
/// last one (inclusive). Falls back to the last snapshot when `from` is
/// past the end.
pub fn select_snapshots(snapshots: &[Snapshot], from: usize, count: usize) -> Vec<Snapshot> {
    if snapshots.is_empty() || count == 0 {
        return Vec::new();
    }
    let last = snapshots.len() - 1;
    let from = from.min(last);
    let span = last - from;
    let count = count.min(span + 1);
    let mut picked: Vec<usize> = if count == 1 {
        vec![last]
    } else {
        (0..count)
            .map(|i| from + (i * span + (count - 1) / 2) / (count - 1))
            .collect()
    };
    picked.dedup();
    picked.into_iter().map(|i| snapshots[i].clone()).collect()
}

fn preconditioned(grad: Vec<f64>, snap: &Snapshot, cfg: &LessConfig) -> Vec<f64> {
    match (&snap.adam_second_moment, cfg.adam_normalize) {
        (Some(v), true) => grad
            .iter()
            .zip(v)
            .map(|(g, vi)| g / (vi.sqrt() + cfg.adam_eps))
            .collect(),
        _ => grad,
    }
}

fn projected_grads(
    params: &ModelParams,
    data: &Dataset,
    proj: &Projection,
    snap: &Snapshot,
    cfg: &LessConfig,
) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .into_par_iter()
        .map(|pos| {
            let g = params.per_sample_grad(data.row(pos), data.label(pos))?;
            Ok(proj.apply(&preconditioned(g, snap, cfg)))
        })
        .collect()
}

pub fn less_influence(
    snapshots: &[Snapshot],
    train: &Dataset,
    mode: Mode,
    test_subset: Option<&Dataset>,
    cfg: &LessConfig,
) -> Result<InfluenceScores> {
    if cfg.projection_dim == 0 {
        return Err(Error::param("projection_dim must be at least 1"));
    }
    let first = snapshots
        .first()
        .ok_or_else(|| Error::param("at least one checkpoint is required"))?;
    let test = match mode {
        Mode::Test => Some(
            test_subset
                .filter(|t| !t.is_empty())
                .ok_or_else(|| Error::param("test mode needs a nonempty test subset"))?,
        ),
        Mode::SelfInfluence => None,
    };
    let k = first.params.n_params();
    let proj = Projection::new(cfg.projection, cfg.projection_dim, k, cfg.seed)?;

    let n = train.len();
    let mut totals = vec![0.0; n];
    let mut zero_norm = 0usize;
    for snap in snapshots {
        let params = &snap.params;
        params.check_dataset(train)?;
        if params.n_params() != k {
            return Err(Error::Shape {
                expected: k,
                got: params.n_params(),
            });
        }
        let store = projected_grads(params, train, &proj, snap, cfg)?;
        match test {
            Some(test) => {
                params.check_dataset(test)?;
                let test_store = projected_grads(params, test, &proj, snap, cfg)?;
                let mut target = vec![0.0; proj.out_dim()];
                for g in &test_store {
                    for (t, gi) in target.iter_mut().zip(g) {
                        *t += gi / test_store.len() as f64;
                    }
                }
                let target_norm = norm2(&target);
                for (total, g) in totals.iter_mut().zip(&store) {
                    let denom = norm2(g) * target_norm;
                    if denom > 0.0 {
                        *total += dot(g, &target) / denom;
                    } else {
                        zero_norm += 1;
                    }
                }
            }
            None => {
                let sq: Vec<f64> = store.iter().map(|g| dot(g, g)).collect();
                let mean = sq.iter().sum::<f64>() / n as f64;
                if mean > 0.0 {
                    for (total, s) in totals.iter_mut().zip(&sq) {
                        *total += s / mean;
                    }
                } else {
                    zero_norm += n;
                }
            }
        }
    }
    let values = totals
        .into_iter()
        .map(|t| t / snapshots.len() as f64)
        .collect();
    let meta = ScoreMetadata {
        seeds: vec![cfg.seed],
        test_subset_ids: test.map(|t| t.ids().to_vec()),
        projection_dim: Some(cfg.projection_dim),
        checkpoint_epochs: snapshots.iter().map(|s| s.epoch).collect(),
        zero_norm_contributions: Some(zero_norm),
        ..ScoreMetadata::default()
    };
    InfluenceScores::from_positions(Method::Less, mode, train, values, meta)
}
