use rayon::prelude::*;

use super::{InfluenceScores, Method, Mode, ScoreMetadata};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{
    default_damping, dot, norm2, Curvature, HessianMode, HessianOperator, ModelParams,
    SolveOptions, DENSE_MAX_PARAMS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct HessianConfig {
    /// `None` picks the architecture default.
    pub damping: Option<f64>,
    pub solve: SolveOptions,
    /// `None` picks dense up to [`DENSE_MAX_PARAMS`] weights.
    pub mode: Option<HessianMode>,
    pub curvature: Curvature,
    /// Mean-gradient norm above which the weights are flagged as not
    /// being a stationary point.
    pub stationarity_tol: f64,
}

impl Default for HessianConfig {
    fn default() -> Self {
        Self {
            damping: None,
            solve: SolveOptions::default(),
            mode: None,
            curvature: Curvature::Exact,
            stationarity_tol: 1e-5,
        }
    }
}

/// First-order influence at trained weights `params`.
///
/// Test mode scores `J_j' H^-1 J~`, where `J~` is the mean gradient over
/// `test_subset`; this is `n_train` times the predicted increase in mean
/// test loss when point `j` is dropped from training. Self mode scores
/// `J_j' H^-1 J_j`, which is non-negative for positive-definite `H`.
pub fn hessian_influence(
    params: &ModelParams,
    train: &Dataset,
    mode: Mode,
    test_subset: Option<&Dataset>,
    cfg: &HessianConfig,
) -> Result<InfluenceScores> {
    params.check_dataset(train)?;
    let mut meta = ScoreMetadata {
        solver_tol: Some(cfg.solve.tol),
        ..ScoreMetadata::default()
    };

    let grad_norm = norm2(&params.mean_grad(train)?);
    meta.train_grad_norm = Some(grad_norm);
    if grad_norm > cfg.stationarity_tol {
        let msg = format!(
            "weights are not stationary: mean training gradient norm {grad_norm:.3e} exceeds {:.1e}",
            cfg.stationarity_tol
        );
        log::warn!("{msg}");
        meta.warnings.push(msg);
    }

    let requested = cfg.damping.unwrap_or_else(|| default_damping(&params.arch));
    let op_mode = cfg
        .mode
        .unwrap_or(if params.n_params() <= DENSE_MAX_PARAMS {
            HessianMode::Dense
        } else {
            HessianMode::MatrixFree
        });
    let mut op = HessianOperator::build(params, train, requested, op_mode, cfg.curvature)?;
    let mut damping = requested;
    if !params.arch.is_convex() {
        if params.n_params() <= DENSE_MAX_PARAMS {
            let min_eig = op.min_eigenvalue();
            meta.min_eigenvalue = Some(min_eig);
            if min_eig <= 0.0 {
                // smallest eigenvalue becomes 9|min| (or 1e-6 when min is 0)
                damping = requested + (10.0 * min_eig.abs()).max(1e-6);
                meta.requested_damping = Some(requested);
                let msg = format!(
                    "Hessian has eigenvalue {min_eig:.3e}; damping raised from {requested:.3e} to {damping:.3e}"
                );
                log::warn!("{msg}");
                meta.warnings.push(msg);
                op = op.with_damping(damping)?;
            }
        } else {
            meta.warnings.push(
                "Hessian too large for an eigenvalue check; positive definiteness assumed".into(),
            );
        }
    }
    meta.damping = Some(damping);

    let solver = op.solver(cfg.solve)?;
    let grads: Vec<Vec<f64>> = (0..train.len())
        .into_par_iter()
        .map(|pos| params.per_sample_grad(train.row(pos), train.label(pos)))
        .collect::<Result<_>>()?;

    let values: Vec<f64> = match mode {
        Mode::Test => {
            let test = test_subset
                .filter(|t| !t.is_empty())
                .ok_or_else(|| Error::param("test mode needs a nonempty test subset"))?;
            params.check_dataset(test)?;
            meta.test_subset_ids = Some(test.ids().to_vec());
            let j_test = params.mean_grad(test)?;
            let u = solver.solve(&j_test)?;
            grads.iter().map(|g| dot(g, &u)).collect()
        }
        Mode::SelfInfluence => grads
            .par_iter()
            .map(|g| solver.solve(g).map(|u| dot(g, &u)))
            .collect::<Result<_>>()?,
    };
    InfluenceScores::from_positions(Method::Hessian, mode, train, values, meta)
}

/// Predicted change in mean loss on `test` when `removed` points leave
/// training: `(1/n) * sum_{j in removed} J_j' H^-1 J~`.
pub fn predicted_group_effect(
    params: &ModelParams,
    train: &Dataset,
    test: &Dataset,
    removed: &crate::dataset::IdSet,
    cfg: &HessianConfig,
) -> Result<f64> {
    let scores = hessian_influence(params, train, Mode::Test, Some(test), cfg)?;
    let mut total = 0.0;
    for id in removed {
        total += scores
            .get(*id)
            .ok_or_else(|| Error::param(format!("point id {id} not in training set")))?;
    }
    Ok(total / train.len() as f64)
}
