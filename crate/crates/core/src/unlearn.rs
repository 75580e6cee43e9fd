//! Unlearning algorithms and influence-filtered unlearning.
//!
//! Filtering drops the lowest-influence points (`D_LI`) from both the
//! forget and the retain set before unlearning runs: the forget points in
//! `D_LI` are never unlearned, and the retain points in `D_LI` are not
//! revisited by fine-tuning.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ForgetSpec, IdSet};
use crate::error::{Error, Result};
use crate::filter::{reduce_sets, select_bottom, select_bottom_within, SelectionResult};
use crate::influence::InfluenceScores;
use crate::model::ModelParams;
use crate::trainer::{continue_training, fit, Optimizer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnlearnKind {
    /// Trains from a seeded initialisation on `train \ S_HI`.
    RetrainFull,
    /// Continues training the input model on `R_HI`.
    FinetuneRetain { epochs: usize, learning_rate: f64 },
    /// Adds `N(0, noise_sigma^2)` to every weight (or reinitialises the
    /// output layer), then fine-tunes on `R_HI`.
    NoiseFinetune {
        noise_sigma: f64,
        reinit_last_layer: bool,
        epochs: usize,
        learning_rate: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlearnAlgorithm {
    #[serde(flatten)]
    pub kind: UnlearnKind,
    pub seed: u64,
}

impl UnlearnAlgorithm {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            UnlearnKind::RetrainFull => Ok(()),
            UnlearnKind::FinetuneRetain {
                epochs,
                learning_rate,
            }
            | UnlearnKind::NoiseFinetune {
                epochs,
                learning_rate,
                ..
            } => {
                if epochs == 0 {
                    return Err(Error::param("unlearning epochs must be at least 1"));
                }
                if !(learning_rate > 0.0) {
                    return Err(Error::param("unlearning learning_rate must be positive"));
                }
                if let UnlearnKind::NoiseFinetune { noise_sigma, .. } = self.kind {
                    if !(noise_sigma >= 0.0) {
                        return Err(Error::param("noise_sigma must be non-negative"));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            UnlearnKind::RetrainFull => "retrain_full",
            UnlearnKind::FinetuneRetain { .. } => "finetune_retain",
            UnlearnKind::NoiseFinetune { .. } => "noise_finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRun {
    pub algorithm: UnlearnAlgorithm,
    pub input_checksum: String,
    pub forget_ids: IdSet,
    pub retain_ids: IdSet,
    pub output: ModelParams,
    pub wall_clock_seconds: f64,
}

/// Fine-tuning always runs minibatch epochs so the cost of an epoch is
/// proportional to the number of retained points.
fn finetune_config(
    train_cfg: &TrainConfig,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        optimizer: match train_cfg.optimizer {
            Optimizer::Gd => Optimizer::Sgd,
            other => other,
        },
        epochs,
        learning_rate,
        seed,
        ..train_cfg.clone()
    }
}

fn perturb(
    model: &ModelParams,
    sigma: f64,
    reinit_last: bool,
    init_scale: f64,
    seed: u64,
) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    if reinit_last {
        for w in &mut out.weights[model.arch.last_layer()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = init_scale * z;
        }
    }
    if sigma > 0.0 {
        for w in &mut out.weights {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w += sigma * z;
        }
    }
    out
}

fn run_algorithm(
    model: &ModelParams,
    train: &Dataset,
    s_hi: &IdSet,
    r_hi: &IdSet,
    alg: &UnlearnAlgorithm,
    train_cfg: &TrainConfig,
) -> Result<ModelParams> {
    match alg.kind {
        UnlearnKind::RetrainFull => {
            let data = train.without(s_hi)?;
            if data.is_empty() {
                return Err(Error::param("retraining set is empty"));
            }
            let cfg = TrainConfig {
                seed: alg.seed,
                ..train_cfg.clone()
            };
            fit(&data, model.arch, model.l2_lambda, &cfg)
        }
        UnlearnKind::FinetuneRetain {
            epochs,
            learning_rate,
        } => {
            let retain = train.subset(r_hi)?;
            continue_training(
                model,
                &retain,
                &finetune_config(train_cfg, epochs, learning_rate, alg.seed),
            )
        }
        UnlearnKind::NoiseFinetune {
            noise_sigma,
            reinit_last_layer,
            epochs,
            learning_rate,
        } => {
            let retain = train.subset(r_hi)?;
            let start = perturb(
                model,
                noise_sigma,
                reinit_last_layer,
                train_cfg.init_scale,
                alg.seed,
            );
            continue_training(
                &start,
                &retain,
                &finetune_config(train_cfg, epochs, learning_rate, alg.seed),
            )
        }
    }
}

/// Runs `alg` with forget set `s_hi` and retain set `r_hi`. The clock
/// covers the algorithm only.
pub fn unlearn(
    model: &ModelParams,
    train: &Dataset,
    s_hi: &IdSet,
    r_hi: &IdSet,
    alg: &UnlearnAlgorithm,
    train_cfg: &TrainConfig,
) -> Result<UnlearnRun> {
    alg.validate()?;
    model.check_dataset(train)?;
    if s_hi.intersection(r_hi).next().is_some() {
        return Err(Error::param("forget and retain sets overlap"));
    }
    if let Some(id) = s_hi.iter().chain(r_hi).find(|id| !train.contains(**id)) {
        return Err(Error::param(format!("point id {id} not in training set")));
    }
    if alg.kind != UnlearnKind::RetrainFull && r_hi.is_empty() {
        return Err(Error::param("fine-tuning needs a nonempty retain set"));
    }
    let start = Instant::now();
    let output = run_algorithm(model, train, s_hi, r_hi, alg, train_cfg)?;
    let wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(UnlearnRun {
        algorithm: *alg,
        input_checksum: model.checksum(),
        forget_ids: s_hi.clone(),
        retain_ids: r_hi.clone(),
        output,
        wall_clock_seconds,
    })
}

/// How much of each set to drop before unlearning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fractions {
    /// The bottom `x` of the whole training set, ranked jointly.
    Combined { x: f64 },
    /// The bottom `forget` of `S` and the bottom `retain` of `R`, each
    /// ranked within its own set.
    Independent { forget: f64, retain: f64 },
}

impl Fractions {
    pub fn selection(
        &self,
        scores: &InfluenceScores,
        spec: &ForgetSpec,
    ) -> Result<SelectionResult> {
        let d_li = match *self {
            Fractions::Combined { x } => select_bottom(scores, x)?,
            Fractions::Independent { forget, retain } => {
                let mut d = select_bottom_within(scores, &spec.forget_ids, forget)?;
                d.extend(select_bottom_within(scores, &spec.retain_ids, retain)?);
                d
            }
        };
        Ok(reduce_sets(spec, &d_li))
    }
}

/// Select the bottom of `scores`, shrink the forget and retain sets, and
/// unlearn with what remains.
pub fn filtered_unlearn(
    model: &ModelParams,
    train: &Dataset,
    spec: &ForgetSpec,
    scores: &InfluenceScores,
    fractions: Fractions,
    alg: &UnlearnAlgorithm,
    train_cfg: &TrainConfig,
) -> Result<(UnlearnRun, SelectionResult)> {
    if !scores.covers(train) {
        return Err(Error::param("scores do not cover the training set"));
    }
    let selection = fractions.selection(scores, spec)?;
    let run = unlearn(
        model,
        train,
        &selection.s_hi,
        &selection.r_hi,
        alg,
        train_cfg,
    )?;
    Ok((run, selection))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_gaussian_blobs, make_forget_spec, ForgetStrategy};
    use crate::model::Arch;

    fn setup() -> (Dataset, ModelParams, ForgetSpec, TrainConfig) {
        let train = generate_gaussian_blobs(20, 2, 2, 2.0, 1).unwrap();
        let arch = Arch::LogisticRegression { dim: 2, classes: 2 };
        let cfg = TrainConfig::default();
        let model = fit(&train, arch, 0.1, &cfg).unwrap();
        let spec = make_forget_spec(&train, 0.2, ForgetStrategy::Random, 3).unwrap();
        (train, model, spec, cfg)
    }

    #[test]
    fn retrain_on_everything_reproduces_training() {
        let (train, model, _, cfg) = setup();
        let alg = UnlearnAlgorithm {
            kind: UnlearnKind::RetrainFull,
            seed: cfg.seed,
        };
        let run = unlearn(&model, &train, &IdSet::new(), &train.id_set(), &alg, &cfg).unwrap();
        assert_eq!(run.output, model);
    }

    #[test]
    fn zero_noise_tiny_step_is_near_identity() {
        let (train, model, spec, cfg) = setup();
        let alg = UnlearnAlgorithm {
            kind: UnlearnKind::NoiseFinetune {
                noise_sigma: 0.0,
                reinit_last_layer: false,
                epochs: 1,
                learning_rate: 1e-12,
            },
            seed: 4,
        };
        let run = unlearn(
            &model,
            &train,
            &spec.forget_ids,
            &spec.retain_ids,
            &alg,
            &cfg,
        )
        .unwrap();
        for (a, b) in run.output.weights.iter().zip(&model.weights) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn finetune_needs_retain_points() {
        let (train, model, spec, cfg) = setup();
        let alg = UnlearnAlgorithm {
            kind: UnlearnKind::FinetuneRetain {
                epochs: 1,
                learning_rate: 0.1,
            },
            seed: 0,
        };
        assert!(unlearn(&model, &train, &spec.forget_ids, &IdSet::new(), &alg, &cfg).is_err());
        assert!(unlearn(
            &model,
            &train,
            &spec.forget_ids,
            &spec.forget_ids,
            &alg,
            &cfg
        )
        .is_err());
    }
}
