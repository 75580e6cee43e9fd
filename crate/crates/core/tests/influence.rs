mod common;

use common::{blobs, median, test_blobs, with_point};
use lowimpact::dataset::{Dataset, IdSet, Split};
use lowimpact::filter::spearman_correlation;
use lowimpact::influence::{
    hessian_influence, less_influence, low_gradient_count_curve, lowest_gradients_scores,
    HessianConfig, LessConfig, LooOracle, Mode, OracleValue, Projection, ProjectionKind,
};
use lowimpact::model::{Arch, ModelParams};
use lowimpact::trainer::{fit, train, NormKind, Snapshot, TrainConfig};

fn lr(data: &Dataset) -> Arch {
    Arch::LogisticRegression {
        dim: data.dim(),
        classes: data.n_classes(),
    }
}

/// 40 two-class points in 3-d plus a point far along the unused third
/// axis, sitting on the class-1 side but labelled 0.
fn with_outlier() -> (Dataset, usize) {
    let base = blobs(20, 2, 3, 2.0, 11);
    let data = with_point(&base, &[-1.0, 3.0, -16.0], 0);
    let id = *data.ids().last().unwrap();
    (data, id)
}

#[test]
fn mislabelled_outlier_is_memorised() {
    let (data, outlier) = with_outlier();
    let cfg = TrainConfig::default();
    let oracle = LooOracle::new(&data, lr(&data), 0.001, &cfg, 5).unwrap();
    let scores = oracle
        .scores(Mode::SelfInfluence, None, OracleValue::Accuracy)
        .unwrap();
    let mut all: Vec<f64> = scores.scores.values().map(|v| v.abs()).collect();
    let med = median(&mut all);
    let s = scores.get(outlier).unwrap();
    assert!(s.abs() > med, "outlier {s}, median {med}");
    assert!(scores.scores.values().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn duplicated_point_is_not_memorised() {
    let (data, outlier) = with_outlier();
    let twin = with_point(&data, &[-1.0, 3.0, -16.0], 0);
    let cfg = TrainConfig::default();
    let oracle = LooOracle::new(&twin, lr(&twin), 0.001, &cfg, 5).unwrap();
    let m = oracle
        .self_influence(outlier, OracleValue::Accuracy)
        .unwrap();
    assert!(m.abs() <= 2.0 / 5.0, "{m}");
}

#[test]
fn confident_point_has_zero_memorisation() {
    let data = blobs(20, 2, 2, 4.0, 5);
    let cfg = TrainConfig::default();
    let oracle = LooOracle::new(&data, lr(&data), 0.01, &cfg, 2).unwrap();
    // the point closest to its own centre along the separating axis
    let pos = (0..data.len())
        .filter(|&p| data.label(p) == 0)
        .max_by(|&a, &b| data.row(a)[0].total_cmp(&data.row(b)[0]))
        .unwrap();
    assert_eq!(
        oracle
            .self_influence(data.id(pos), OracleValue::Accuracy)
            .unwrap(),
        0.0
    );
}

#[test]
fn hessian_self_influence_tracks_loss_oracle() {
    let data = blobs(30, 2, 3, 1.5, 21);
    let cfg = TrainConfig::default();
    let l2 = 0.1;
    let model = fit(&data, lr(&data), l2, &cfg).unwrap();
    let approx = hessian_influence(
        &model,
        &data,
        Mode::SelfInfluence,
        None,
        &HessianConfig::default(),
    )
    .unwrap();
    let oracle = LooOracle::new(&data, lr(&data), l2, &cfg, 1).unwrap();
    let exact = oracle
        .scores(Mode::SelfInfluence, None, OracleValue::Loss)
        .unwrap();
    let rho = spearman_correlation(&approx.scores, &exact.scores).unwrap();
    assert!(rho >= 0.9, "spearman {rho}");
}

#[test]
fn first_order_prediction_matches_retraining() {
    let data = blobs(100, 2, 3, 1.5, 8);
    let test = test_blobs(50, 2, 3, 1.5, 9);
    let cfg = TrainConfig::default();
    let l2 = 0.1;
    let arch = lr(&data);
    let model = fit(&data, arch, l2, &cfg).unwrap();
    let base = model.mean_loss(&test).unwrap();
    let scores = hessian_influence(
        &model,
        &data,
        Mode::Test,
        Some(&test),
        &HessianConfig::default(),
    )
    .unwrap();
    let n = data.len() as f64;
    let mut errs: Vec<f64> = data
        .ids()
        .iter()
        .map(|&id| {
            let removed: IdSet = [id].into();
            let retrained = fit(&data.without(&removed).unwrap(), arch, l2, &cfg).unwrap();
            let truth = retrained.mean_loss(&test).unwrap() - base;
            let predicted = scores.get(id).unwrap() / n;
            (predicted - truth).abs() / truth.abs().max(1e-15)
        })
        .collect();
    let med = median(&mut errs);
    assert!(med <= 0.5, "median relative error {med}");
}

#[test]
fn self_scores_are_non_negative() {
    let data = blobs(25, 3, 2, 2.0, 4);
    let cfg = TrainConfig::default();
    let model = fit(&data, lr(&data), 0.05, &cfg).unwrap();
    let s = hessian_influence(
        &model,
        &data,
        Mode::SelfInfluence,
        None,
        &HessianConfig::default(),
    )
    .unwrap();
    assert!(s.scores.values().all(|&v| v >= -1e-8));

    let mlp = Arch::Mlp {
        dim: 2,
        hidden: 4,
        classes: 3,
    };
    let cfg = TrainConfig {
        epochs: 3000,
        ..TrainConfig::default()
    };
    let model = fit(&data, mlp, 0.01, &cfg).unwrap();
    let hc = HessianConfig {
        stationarity_tol: f64::INFINITY,
        ..HessianConfig::default()
    };
    let s = hessian_influence(&model, &data, Mode::SelfInfluence, None, &hc).unwrap();
    assert!(s.metadata.min_eigenvalue.is_some());
    assert!(s.scores.values().all(|&v| v >= -1e-8));
}

#[test]
fn zero_gradient_point_scores_zero() {
    // a very confident prediction on x = 0 leaves a vanishing gradient
    let arch = Arch::LogisticRegression { dim: 1, classes: 2 };
    let model = ModelParams::new(arch, 0.0, vec![0.0, 40.0, 0.0, -40.0]).unwrap();
    let data = Dataset::new(vec![0.0], 1, vec![0], vec![0], 2, Split::Train).unwrap();
    let hc = HessianConfig {
        damping: Some(1.0),
        ..HessianConfig::default()
    };
    let s = hessian_influence(&model, &data, Mode::SelfInfluence, None, &hc).unwrap();
    assert!(s.get(0).unwrap().abs() < 1e-30);
    let probe = Dataset::new(vec![1.0], 1, vec![1], vec![0], 2, Split::Test).unwrap();
    let t = hessian_influence(&model, &data, Mode::Test, Some(&probe), &hc).unwrap();
    assert!(t.get(0).unwrap().abs() < 1e-15);
}

#[test]
fn scores_are_permutation_equivariant() {
    let data = blobs(15, 3, 2, 2.0, 30);
    let test = test_blobs(10, 3, 2, 2.0, 31);
    let cfg = TrainConfig::default();
    let out = train(&data, lr(&data), 0.05, &cfg).unwrap();
    let perm: Vec<usize> = (0..data.len()).rev().collect();
    let shuffled = data.permuted(&perm);

    let hc = HessianConfig::default();
    let a = hessian_influence(&out.params, &data, Mode::Test, Some(&test), &hc).unwrap();
    let b = hessian_influence(&out.params, &shuffled, Mode::Test, Some(&test), &hc).unwrap();
    let lc = LessConfig {
        projection_dim: 32,
        ..LessConfig::default()
    };
    let la = less_influence(&out.snapshots[3..6], &data, Mode::SelfInfluence, None, &lc).unwrap();
    let lb = less_influence(
        &out.snapshots[3..6],
        &shuffled,
        Mode::SelfInfluence,
        None,
        &lc,
    )
    .unwrap();
    for id in data.ids() {
        let (x, y) = (a.get(*id).unwrap(), b.get(*id).unwrap());
        assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        let (x, y) = (la.get(*id).unwrap(), lb.get(*id).unwrap());
        assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
    }
}

#[test]
fn identical_points_get_identical_less_scores() {
    let base = blobs(10, 2, 2, 2.0, 2);
    let data = with_point(&with_point(&base, &[0.3, 0.4], 1), &[0.3, 0.4], 1);
    let test = test_blobs(10, 2, 2, 2.0, 3);
    let out = train(&data, lr(&data), 0.05, &TrainConfig::default()).unwrap();
    let (a, b) = (data.id(data.len() - 2), data.id(data.len() - 1));
    for mode in [Mode::SelfInfluence, Mode::Test] {
        let s = less_influence(
            &out.snapshots[5..],
            &data,
            mode,
            Some(&test),
            &LessConfig::default(),
        )
        .unwrap();
        assert_eq!(s.get(a), s.get(b));
    }
}

#[test]
fn orthonormal_projection_preserves_gradient_norm_ranking() {
    let data = blobs(15, 2, 3, 1.5, 40);
    let model = fit(&data, lr(&data), 0.05, &TrainConfig::default()).unwrap();
    let snap = Snapshot {
        epoch: 0,
        params: model.clone(),
        adam_second_moment: None,
    };
    let cfg = LessConfig {
        projection_dim: model.n_params() + 3,
        projection: ProjectionKind::Orthonormal,
        ..LessConfig::default()
    };
    let s = less_influence(&[snap], &data, Mode::SelfInfluence, None, &cfg).unwrap();
    let norms: std::collections::BTreeMap<usize, f64> = (0..data.len())
        .map(|p| {
            let g = model.per_sample_grad(data.row(p), data.label(p)).unwrap();
            (data.id(p), common::norm(&g))
        })
        .collect();
    let rho = spearman_correlation(&s.scores, &norms).unwrap();
    assert!((rho - 1.0).abs() < 1e-12);
}

#[test]
fn projected_inner_products_are_preserved() {
    // K = (19 + 1) * 5 = 100 parameters
    let data = blobs(30, 5, 19, 1.0, 50);
    let model = fit(
        &data,
        lr(&data),
        0.05,
        &TrainConfig {
            epochs: 300,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    assert_eq!(model.n_params(), 100);
    let grads: Vec<Vec<f64>> = (0..data.len())
        .map(|p| model.per_sample_grad(data.row(p), data.label(p)).unwrap())
        .collect();
    let proj = Projection::new(ProjectionKind::Gaussian, 512, 100, 7).unwrap();
    let projected: Vec<Vec<f64>> = grads.iter().map(|g| proj.apply(g)).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut within = 0;
    let mut total = 0;
    for i in 0..grads.len() {
        for j in (i + 1)..grads.len() {
            let raw = dot(&grads[i], &grads[j]);
            let est = dot(&projected[i], &projected[j]);
            let rel = (est - raw).abs() / (common::norm(&grads[i]) * common::norm(&grads[j]));
            within += usize::from(rel <= 0.15);
            total += 1;
        }
    }
    assert!(within as f64 >= 0.95 * total as f64, "{within}/{total}");
}

#[test]
fn lowest_gradients_defaults_and_bounds() {
    let data = blobs(40, 2, 2, 2.0, 60);
    let out = train(&data, lr(&data), 0.01, &TrainConfig::default()).unwrap();
    let s = lowest_gradients_scores(&out.trace_l2, lowimpact::influence::DEFAULT_FROM_CHECKPOINT)
        .unwrap();
    assert_eq!(s.len(), data.len());
    assert_eq!(
        s.metadata.checkpoint_epochs[0],
        out.trace_l2.checkpoints[5].epoch
    );
    assert!(s.scores.values().all(|&v| v >= 0.0));

    let counts = low_gradient_count_curve(&out.trace_l2, 5.0).unwrap();
    assert_eq!(counts.len(), out.trace_l2.checkpoints.len());
    assert!(counts.iter().all(|c| c.count <= data.len()));
}

#[test]
fn low_gradient_count_settles_once_loss_plateaus() {
    let data = blobs(100, 2, 2, 2.0, 61);
    let out = train(&data, lr(&data), 0.01, &TrainConfig::default()).unwrap();
    assert!(out.converged);
    let final_loss = out.params.mean_loss(&data).unwrap();
    let plateau = out
        .snapshots
        .iter()
        .position(|s| s.params.mean_loss(&data).unwrap() - final_loss <= 1e-6 * final_loss)
        .unwrap();
    let counts = low_gradient_count_curve(&out.trace_l2, 5.0).unwrap();
    for w in counts[plateau..].windows(2) {
        assert!(w[1].count >= w[0].count, "{:?}", w);
    }
}

#[test]
fn trace_norms_match_snapshot_gradients() {
    let data = blobs(10, 2, 2, 2.0, 70);
    let out = train(&data, lr(&data), 0.01, &TrainConfig::default()).unwrap();
    for (cp, snap) in out
        .trace_l2
        .checkpoints
        .iter()
        .zip(&out.snapshots)
        .step_by(50)
    {
        assert_eq!(cp.epoch, snap.epoch);
        for p in 0..data.len() {
            let g = snap
                .params
                .per_sample_grad(data.row(p), data.label(p))
                .unwrap();
            assert_eq!(cp.norms[p], NormKind::L2.apply(&g));
        }
    }
}
