//! Exact leave-one-out influence by retraining.
//!
//! The oracle trains `repeats` full-data models (one per seed) once and
//! retrains without each target on demand. Two readings are offered: the
//! accuracy-valued difference `acc(D) - acc(D \ {j})`, and the loss-valued
//! difference `L(D \ {j}) - L(D)` of mean per-sample loss, which is the
//! quantity the first-order approximations predict.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{InfluenceScores, Method, Mode, ScoreMetadata};
use crate::dataset::{Dataset, IdSet, PointId};
use crate::error::{Error, Result};
use crate::model::{Arch, ModelParams};
use crate::trainer::{fit, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleValue {
    Accuracy,
    Loss,
}

pub struct LooOracle<'a> {
    train: &'a Dataset,
    arch: Arch,
    l2_lambda: f64,
    config: TrainConfig,
    seeds: Vec<u64>,
    full_models: Vec<ModelParams>,
}

impl<'a> LooOracle<'a> {
    /// Trains the `repeats` reference models with seeds
    /// `config.seed, config.seed + 1, ...`.
    pub fn new(
        train: &'a Dataset,
        arch: Arch,
        l2_lambda: f64,
        config: &TrainConfig,
        repeats: usize,
    ) -> Result<Self> {
        if repeats == 0 {
            return Err(Error::param("repeats must be at least 1"));
        }
        let seeds: Vec<u64> = (0..repeats as u64)
            .map(|r| config.seed.wrapping_add(r))
            .collect();
        let full_models = seeds
            .par_iter()
            .map(|&seed| {
                let cfg = TrainConfig {
                    seed,
                    ..config.clone()
                };
                fit(train, arch, l2_lambda, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train,
            arch,
            l2_lambda,
            config: config.clone(),
            seeds,
            full_models,
        })
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn full_models(&self) -> &[ModelParams] {
        &self.full_models
    }

    /// One retrained model per seed with `removed` taken out.
    pub fn retrain_without(&self, removed: &IdSet) -> Result<Vec<ModelParams>> {
        let reduced = self.train.without(removed)?;
        if reduced.is_empty() {
            return Err(Error::param("no training points remain after removal"));
        }
        self.seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig {
                    seed,
                    ..self.config.clone()
                };
                fit(&reduced, self.arch, self.l2_lambda, &cfg)
            })
            .collect()
    }

    fn check_target(&self, target: PointId) -> Result<()> {
        if self.train.contains(target) {
            Ok(())
        } else {
            Err(Error::param(format!(
                "target id {target} not in training set"
            )))
        }
    }

    fn value(model: &ModelParams, probe: &Dataset, value: OracleValue) -> Result<f64> {
        match value {
            OracleValue::Accuracy => model.accuracy_on(probe),
            OracleValue::Loss => model.mean_loss(probe),
        }
    }

    /// Mean over seeds of the influence of removing `target` on `probe`.
    pub fn influence(&self, probe: &Dataset, target: PointId, value: OracleValue) -> Result<f64> {
        self.check_target(target)?;
        let removed: IdSet = [target].into_iter().collect();
        let retrained = self.retrain_without(&removed)?;
        let mut total = 0.0;
        for (full, minus) in self.full_models.iter().zip(&retrained) {
            let a = Self::value(full, probe, value)?;
            let b = Self::value(minus, probe, value)?;
            total += match value {
                OracleValue::Accuracy => a - b,
                OracleValue::Loss => b - a,
            };
        }
        Ok(total / self.seeds.len() as f64)
    }

    /// Influence of `target` on itself.
    pub fn self_influence(&self, target: PointId, value: OracleValue) -> Result<f64> {
        self.check_target(target)?;
        let probe = self.train.subset(&[target].into_iter().collect())?;
        self.influence(&probe, target, value)
    }

    /// Scores every training point; retrains run in parallel.
    pub fn scores(
        &self,
        mode: Mode,
        probe: Option<&Dataset>,
        value: OracleValue,
    ) -> Result<InfluenceScores> {
        if mode == Mode::Test && probe.is_none_or(|p| p.is_empty()) {
            return Err(Error::param("test mode needs a nonempty probe set"));
        }
        let values = self
            .train
            .ids()
            .par_iter()
            .map(|&id| match mode {
                Mode::Test => self.influence(probe.expect("checked above"), id, value),
                Mode::SelfInfluence => self.self_influence(id, value),
            })
            .collect::<Result<Vec<f64>>>()?;
        let scores: BTreeMap<PointId, f64> = self.train.ids().iter().copied().zip(values).collect();
        let metadata = ScoreMetadata {
            seeds: self.seeds.clone(),
            test_subset_ids: probe
                .filter(|_| mode == Mode::Test)
                .map(|p| p.ids().to_vec()),
            oracle_value: Some(value),
            ..ScoreMetadata::default()
        };
        InfluenceScores::new(Method::ExactLoo, mode, scores, metadata)
    }
}

/// Accuracy-valued leave-one-out influence of `target` on `probe`, averaged
/// over `repeats` seeds. Always within `[-1, 1]`.
pub fn exact_loo_influence(
    train: &Dataset,
    probe: &Dataset,
    target: PointId,
    arch: Arch,
    l2_lambda: f64,
    config: &TrainConfig,
    repeats: usize,
) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::param("probe set is empty"));
    }
    LooOracle::new(train, arch, l2_lambda, config, repeats)?.influence(
        probe,
        target,
        OracleValue::Accuracy,
    )
}

/// Label memorisation: accuracy-valued self-influence.
pub fn memorization_score(
    train: &Dataset,
    target: PointId,
    arch: Arch,
    l2_lambda: f64,
    config: &TrainConfig,
    repeats: usize,
) -> Result<f64> {
    LooOracle::new(train, arch, l2_lambda, config, repeats)?
        .self_influence(target, OracleValue::Accuracy)
}
