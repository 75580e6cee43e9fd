//! Deterministic training with per-point gradient-norm traces.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::{create_csv, finish_csv, open_csv, ArtifactHeader};
use crate::dataset::{Dataset, IdSet, PointId};
use crate::error::{Error, Result};
use crate::model::{norm2, Arch, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Full-batch gradient descent; stops once the mean gradient norm
    /// falls below `convergence_grad_tol`.
    Gd,
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Epoch budget; an upper bound for `Gd`.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Record a checkpoint every this many epochs...
    pub checkpoint_every: usize,
    /// ...after recording every one of the first `dense_checkpoints` epochs.
    pub dense_checkpoints: usize,
    pub convergence_grad_tol: f64,
    /// Standard deviation of the Gaussian initialisation.
    pub init_scale: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Gd,
            learning_rate: 0.2,
            epochs: 20_000,
            batch_size: 32,
            seed: 0,
            checkpoint_every: 5,
            dense_checkpoints: 12,
            convergence_grad_tol: 1e-7,
            init_scale: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning_rate must be positive"));
        }
        if !(self.convergence_grad_tol > 0.0) {
            return Err(Error::param("convergence_grad_tol must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::param("checkpoint_every must be at least 1"));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::param("init_scale must be non-negative"));
        }
        Ok(())
    }

    fn is_checkpoint(&self, epoch: usize) -> bool {
        epoch <= self.dense_checkpoints || epoch.is_multiple_of(self.checkpoint_every)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L2,
    LInf,
}

impl NormKind {
    pub fn apply(self, v: &[f64]) -> f64 {
        match self {
            NormKind::L2 => norm2(v),
            NormKind::LInf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            NormKind::L2 => "l2",
            NormKind::LInf => "linf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCheckpoint {
    pub epoch: usize,
    /// Aligned with [`GradientTrace::point_ids`].
    pub norms: Vec<f64>,
}

/// Per-point per-sample gradient norms recorded during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTrace {
    pub norm_kind: NormKind,
    pub point_ids: Vec<PointId>,
    pub checkpoints: Vec<TraceCheckpoint>,
}

impl GradientTrace {
    pub fn len(&self) -> usize {
        self.checkpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.checkpoints.is_empty()
    }

    /// Long format: `epoch,point_id,norm`.
    pub fn write_csv(&self, path: &Path, header: Option<&ArtifactHeader>) -> Result<()> {
        let mut wtr = create_csv(path, header)?;
        wtr.write_record(["epoch", "point_id", "norm"])?;
        for cp in &self.checkpoints {
            for (id, norm) in self.point_ids.iter().zip(&cp.norms) {
                wtr.write_record([cp.epoch.to_string(), id.to_string(), norm.to_string()])?;
            }
        }
        finish_csv(wtr, path)
    }

    pub fn read_csv(path: &Path, norm_kind: NormKind) -> Result<Self> {
        let mut rdr = open_csv(path)?;
        let mut point_ids: Vec<PointId> = Vec::new();
        let mut checkpoints: Vec<TraceCheckpoint> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse_err = || Error::param(format!("malformed trace row in {}", path.display()));
            let epoch: usize = rec
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(parse_err)?;
            let id: PointId = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(parse_err)?;
            let norm: f64 = rec
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(parse_err)?;
            if checkpoints.last().map(|c| c.epoch) != Some(epoch) {
                checkpoints.push(TraceCheckpoint {
                    epoch,
                    norms: Vec::new(),
                });
            }
            let first = checkpoints.len() == 1;
            let cp = checkpoints.last_mut().expect("pushed above");
            if first {
                point_ids.push(id);
            } else if point_ids.get(cp.norms.len()) != Some(&id) {
                return Err(Error::param(format!(
                    "trace {} lists points in inconsistent order",
                    path.display()
                )));
            }
            cp.norms.push(norm);
        }
        if checkpoints.iter().any(|c| c.norms.len() != point_ids.len()) {
            return Err(Error::param(format!(
                "trace {} has incomplete checkpoints",
                path.display()
            )));
        }
        Ok(Self {
            norm_kind,
            point_ids,
            checkpoints,
        })
    }
}

/// Model state at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub epoch: usize,
    pub params: ModelParams,
    /// Bias-corrected Adam second-moment estimate, when training with Adam.
    pub adam_second_moment: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace_l2: GradientTrace,
    pub trace_linf: GradientTrace,
    pub snapshots: Vec<Snapshot>,
    pub epochs_run: usize,
    pub final_grad_norm: f64,
    pub converged: bool,
}

pub fn init_params(arch: Arch, l2_lambda: f64, seed: u64, scale: f64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..arch.n_params())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    ModelParams {
        arch,
        l2_lambda,
        weights,
    }
}

/// Trains on `data` and records the gradient-norm traces.
pub fn train(
    data: &Dataset,
    arch: Arch,
    l2_lambda: f64,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    run(data, arch, l2_lambda, config, true)
}

/// Trains from the same seeded start on `data` minus `removed_ids`.
pub fn retrain_without(
    data: &Dataset,
    removed_ids: &IdSet,
    arch: Arch,
    l2_lambda: f64,
    config: &TrainConfig,
) -> Result<ModelParams> {
    let reduced = data.without(removed_ids)?;
    if reduced.is_empty() {
        return Err(Error::param("no training points remain after removal"));
    }
    Ok(run(&reduced, arch, l2_lambda, config, false)?.params)
}

/// Trains without recording traces or snapshots.
pub fn fit(
    data: &Dataset,
    arch: Arch,
    l2_lambda: f64,
    config: &TrainConfig,
) -> Result<ModelParams> {
    Ok(run(data, arch, l2_lambda, config, false)?.params)
}

/// Continues training from `start` (no traces).
pub fn continue_training(
    start: &ModelParams,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<ModelParams> {
    config.validate()?;
    start.check_dataset(data)?;
    if data.is_empty() {
        return Err(Error::param("cannot train on an empty dataset"));
    }
    let mut state = State::new(start.clone(), config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 1..=config.epochs {
        if config.optimizer == Optimizer::Gd {
            let g = state.params.mean_grad(data)?;
            if norm2(&g) <= config.convergence_grad_tol {
                break;
            }
            state.apply_update(&g, config);
        } else {
            state.minibatch_epoch(data, config, &mut rng)?;
        }
        state.check_finite(epoch)?;
    }
    Ok(state.params)
}

struct State {
    params: ModelParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl State {
    fn new(params: ModelParams, _config: &TrainConfig) -> Self {
        let k = params.n_params();
        Self {
            params,
            m: vec![0.0; k],
            v: vec![0.0; k],
            t: 0,
        }
    }

    fn apply_update(&mut self, g: &[f64], cfg: &TrainConfig) {
        let w = &mut self.params.weights;
        match cfg.optimizer {
            Optimizer::Gd | Optimizer::Sgd => {
                for (wi, gi) in w.iter_mut().zip(g) {
                    *wi -= cfg.learning_rate * gi;
                }
            }
            Optimizer::Adam => {
                self.t += 1;
                let b1 = cfg.adam_beta1;
                let b2 = cfg.adam_beta2;
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - b2.powi(self.t as i32);
                for i in 0..w.len() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    w[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
                }
            }
        }
    }

    fn second_moment(&self, cfg: &TrainConfig) -> Option<Vec<f64>> {
        if cfg.optimizer != Optimizer::Adam || self.t == 0 {
            return None;
        }
        let c2 = 1.0 - cfg.adam_beta2.powi(self.t as i32);
        Some(self.v.iter().map(|v| v / c2).collect())
    }

    fn minibatch_epoch(
        &mut self,
        data: &Dataset,
        cfg: &TrainConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let k = self.params.n_params();
        let mut g = vec![0.0; k];
        for batch in order.chunks(cfg.batch_size) {
            let lambda = self.params.l2_lambda;
            for (gi, wi) in g.iter_mut().zip(&self.params.weights) {
                *gi = lambda * wi;
            }
            let s = 1.0 / batch.len() as f64;
            for &pos in batch {
                self.params
                    .accumulate_ce_grad(data.row(pos), data.label(pos), s, &mut g);
            }
            self.apply_update(&g, cfg);
        }
        Ok(())
    }

    fn check_finite(&self, epoch: usize) -> Result<()> {
        if self.params.weights.iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence { epoch })
        }
    }
}

fn run(
    data: &Dataset,
    arch: Arch,
    l2_lambda: f64,
    cfg: &TrainConfig,
    record: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::param("cannot train on an empty dataset"));
    }
    if !(l2_lambda >= 0.0) {
        return Err(Error::param("l2_lambda must be non-negative"));
    }
    let start = init_params(arch, l2_lambda, cfg.seed, cfg.init_scale);
    start.check_dataset(data)?;
    // the shuffle stream is separate from the initialisation stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut state = State::new(start, cfg);

    let mut trace_l2 = GradientTrace {
        norm_kind: NormKind::L2,
        point_ids: data.ids().to_vec(),
        checkpoints: Vec::new(),
    };
    let mut trace_linf = GradientTrace {
        norm_kind: NormKind::LInf,
        ..trace_l2.clone()
    };
    let mut snapshots = Vec::new();
    let mut record_at = |epoch: usize, state: &State| -> Result<()> {
        if !record {
            return Ok(());
        }
        let mut l2 = Vec::with_capacity(data.len());
        let mut linf = Vec::with_capacity(data.len());
        for pos in 0..data.len() {
            let g = state
                .params
                .per_sample_grad(data.row(pos), data.label(pos))?;
            l2.push(NormKind::L2.apply(&g));
            linf.push(NormKind::LInf.apply(&g));
        }
        trace_l2
            .checkpoints
            .push(TraceCheckpoint { epoch, norms: l2 });
        trace_linf
            .checkpoints
            .push(TraceCheckpoint { epoch, norms: linf });
        snapshots.push(Snapshot {
            epoch,
            params: state.params.clone(),
            adam_second_moment: state.second_moment(cfg),
        });
        Ok(())
    };

    record_at(0, &state)?;
    let mut last_recorded = 0;
    let mut epoch = 0;
    let mut converged = false;
    let mut grad_norm = f64::NAN;
    loop {
        if cfg.optimizer == Optimizer::Gd {
            let g = state.params.mean_grad(data)?;
            grad_norm = norm2(&g);
            if !grad_norm.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if grad_norm <= cfg.convergence_grad_tol {
                converged = true;
                break;
            }
            if epoch == cfg.epochs {
                break;
            }
            state.apply_update(&g, cfg);
        } else {
            if epoch == cfg.epochs {
                break;
            }
            state.minibatch_epoch(data, cfg, &mut rng)?;
        }
        epoch += 1;
        state.check_finite(epoch)?;
        if cfg.is_checkpoint(epoch) {
            record_at(epoch, &state)?;
            last_recorded = epoch;
        }
    }
    if last_recorded != epoch {
        record_at(epoch, &state)?;
    }
    if cfg.optimizer != Optimizer::Gd {
        grad_norm = norm2(&state.params.mean_grad(data)?);
        converged = grad_norm <= cfg.convergence_grad_tol;
    }
    Ok(TrainOutcome {
        params: state.params,
        trace_l2,
        trace_linf,
        snapshots,
        epochs_run: epoch,
        final_grad_norm: grad_norm,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_gaussian_blobs, Split};

    fn two_points() -> Dataset {
        Dataset::new(
            vec![-1.0, 0.5, 1.0, -0.5],
            2,
            vec![0, 1],
            vec![0, 1],
            2,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn converges_on_two_points() {
        let arch = Arch::LogisticRegression { dim: 2, classes: 2 };
        let cfg = TrainConfig::default();
        let out = train(&two_points(), arch, 0.1, &cfg).unwrap();
        assert!(out.converged);
        assert!(norm2(&out.params.mean_grad(&two_points()).unwrap()) <= 1e-7);
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate_gaussian_blobs(30, 3, 3, 2.0, 2).unwrap();
        let arch = Arch::LogisticRegression { dim: 3, classes: 3 };
        for optimizer in [Optimizer::Gd, Optimizer::Sgd, Optimizer::Adam] {
            let cfg = TrainConfig {
                optimizer,
                learning_rate: if optimizer == Optimizer::Adam {
                    0.01
                } else {
                    0.1
                },
                epochs: 30,
                seed: 4,
                ..TrainConfig::default()
            };
            let a = train(&data, arch, 0.01, &cfg).unwrap();
            let b = train(&data, arch, 0.01, &cfg).unwrap();
            assert_eq!(a.params, b.params);
            assert_eq!(a.trace_l2, b.trace_l2);
        }
    }

    #[test]
    fn checkpoint_schedule() {
        let data = generate_gaussian_blobs(10, 2, 2, 2.0, 2).unwrap();
        let arch = Arch::LogisticRegression { dim: 2, classes: 2 };
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 0.05,
            epochs: 23,
            ..TrainConfig::default()
        };
        let out = train(&data, arch, 0.0, &cfg).unwrap();
        let epochs: Vec<usize> = out.trace_l2.checkpoints.iter().map(|c| c.epoch).collect();
        let mut expected: Vec<usize> = (0..=12).collect();
        expected.extend([15, 20, 23]);
        assert_eq!(epochs, expected);
        assert_eq!(out.snapshots.len(), expected.len());
    }

    #[test]
    fn empty_remainder_is_error() {
        let data = two_points();
        let arch = Arch::LogisticRegression { dim: 2, classes: 2 };
        let all = data.id_set();
        assert!(matches!(
            retrain_without(&data, &all, arch, 0.1, &TrainConfig::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn divergence_reported() {
        let data = generate_gaussian_blobs(10, 2, 2, 50.0, 2).unwrap();
        let arch = Arch::LogisticRegression { dim: 2, classes: 2 };
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 50,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&data, arch, 1.0, &cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn trace_csv_round_trip() {
        let data = generate_gaussian_blobs(5, 2, 2, 2.0, 2).unwrap();
        let arch = Arch::LogisticRegression { dim: 2, classes: 2 };
        let cfg = TrainConfig {
            epochs: 7,
            ..TrainConfig::default()
        };
        let out = train(&data, arch, 0.1, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        out.trace_l2.write_csv(&path, None).unwrap();
        let back = GradientTrace::read_csv(&path, NormKind::L2).unwrap();
        assert_eq!(back, out.trace_l2);
    }
}
