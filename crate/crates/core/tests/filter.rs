mod common;

use std::collections::BTreeMap;

use common::blobs;
use lowimpact::dataset::{Dataset, ForgetSpec, IdSet, Split};
use lowimpact::filter::{
    bottom_count, class_distribution, cosine_filter, cosine_qualifying, jaccard_similarity,
    random_selection, reduce_sets, select_bottom, select_bottom_within, similarity_vectors,
    spearman_correlation, AgreementMatrix,
};
use lowimpact::influence::{
    hessian_influence, HessianConfig, InfluenceScores, Method, Mode, ScoreMetadata,
};
use lowimpact::model::Arch;
use lowimpact::trainer::{fit, TrainConfig};
use proptest::prelude::*;

fn scores(values: &[f64], mode: Mode) -> InfluenceScores {
    let map = values.iter().copied().enumerate().collect();
    InfluenceScores::new(Method::Hessian, mode, map, ScoreMetadata::default()).unwrap()
}

fn mode_of(test: bool) -> Mode {
    if test {
        Mode::Test
    } else {
        Mode::SelfInfluence
    }
}

/// Brute-force Spearman: ranks by counting, then Pearson.
fn brute_spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64], x: f64| {
        let below = v.iter().filter(|&&y| y < x).count() as f64;
        let equal = v.iter().filter(|&&y| y == x).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let ra: Vec<f64> = a.iter().map(|&x| rank(a, x)).collect();
    let rb: Vec<f64> = b.iter().map(|&x| rank(b, x)).collect();
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn score_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    // a small value alphabet forces ties
    proptest::collection::vec(
        prop_oneof![(-4i32..4).prop_map(f64::from), -10.0f64..10.0],
        n,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn selections_are_nested(values in score_vec(40), x1 in 0.0f64..=1.0, x2 in 0.0f64..=1.0, test in any::<bool>()) {
        let s = scores(&values, mode_of(test));
        let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
        let a = select_bottom(&s, lo).unwrap();
        let b = select_bottom(&s, hi).unwrap();
        prop_assert!(a.is_subset(&b));
        prop_assert_eq!(b.len(), bottom_count(hi, 40));
        // everything selected is no larger than everything left out
        let max_in = b.iter().map(|&i| s.effective(values[i])).fold(f64::NEG_INFINITY, f64::max);
        let min_out = (0..40).filter(|i| !b.contains(i)).map(|i| s.effective(values[i])).fold(f64::INFINITY, f64::min);
        prop_assert!(max_in <= min_out);
    }

    #[test]
    fn selection_ignores_monotone_transforms(values in score_vec(30), x in 0.0f64..=1.0) {
        let raw = scores(&values, Mode::SelfInfluence);
        let exp: Vec<f64> = values.iter().map(|v| v.exp()).collect();
        prop_assert_eq!(select_bottom(&raw, x).unwrap(), select_bottom(&scores(&exp, Mode::SelfInfluence), x).unwrap());
        let raw = scores(&values, Mode::Test);
        let cubed: Vec<f64> = values.iter().map(|v| v.powi(3)).collect();
        prop_assert_eq!(select_bottom(&raw, x).unwrap(), select_bottom(&scores(&cubed, Mode::Test), x).unwrap());
    }

    #[test]
    fn reduction_partitions_the_training_set(
        forget_mask in proptest::collection::vec(any::<bool>(), 30),
        values in score_vec(30),
        x in 0.0f64..=1.0,
    ) {
        let train = Dataset::new(vec![0.0; 30], 1, (0..30).map(|i| i % 2).collect(), (0..30).collect(), 2, Split::Train).unwrap();
        let forget: IdSet = (0..30).filter(|&i| forget_mask[i]).collect();
        prop_assume!(!forget.is_empty());
        let spec = ForgetSpec::from_forget(&train, forget).unwrap();
        let d_li = select_bottom(&scores(&values, Mode::SelfInfluence), x).unwrap();
        let r = reduce_sets(&spec, &d_li);
        prop_assert!(r.s_hi.is_disjoint(&r.r_hi));
        prop_assert!(r.s_hi.is_disjoint(&d_li) && r.r_hi.is_disjoint(&d_li));
        prop_assert_eq!(r.s_hi.len() + r.r_hi.len() + d_li.len(), 30);
        prop_assert_eq!(r.s_hi.len(), spec.forget_ids.len() - spec.forget_ids.intersection(&d_li).count());
        prop_assert!(r.s_hi.is_subset(&spec.forget_ids) && r.r_hi.is_subset(&spec.retain_ids));
    }

    #[test]
    fn spearman_matches_brute_force(a in score_vec(25), b in score_vec(25)) {
        let ma: BTreeMap<usize, f64> = a.iter().copied().enumerate().collect();
        let mb: BTreeMap<usize, f64> = b.iter().copied().enumerate().collect();
        let oracle = brute_spearman(&a, &b);
        match spearman_correlation(&ma, &mb) {
            Ok(rho) => prop_assert!((rho - oracle).abs() <= 1e-12, "{} vs {}", rho, oracle),
            Err(_) => prop_assert!(oracle.is_nan()),
        }
    }

    #[test]
    fn jaccard_of_overlapping_sets(n in 1usize..40, m_frac in 0.0f64..=1.0) {
        let m = (m_frac * n as f64) as usize;
        let a: IdSet = (0..n).collect();
        let b: IdSet = (n - m..2 * n - m).collect();
        let j = jaccard_similarity(&a, &b);
        prop_assert!((j - m as f64 / (2 * n - m) as f64).abs() < 1e-15);
        prop_assert_eq!(j, jaccard_similarity(&b, &a));
    }

    #[test]
    fn within_selection_stays_inside(values in score_vec(30), x in 0.0f64..=1.0, mask in proptest::collection::vec(any::<bool>(), 30)) {
        let within: IdSet = (0..30).filter(|&i| mask[i]).collect();
        let s = scores(&values, Mode::SelfInfluence);
        let sel = select_bottom_within(&s, &within, x).unwrap();
        prop_assert!(sel.is_subset(&within));
        prop_assert_eq!(sel.len(), bottom_count(x, within.len()));
    }
}

#[test]
fn one_third_selects_exactly_a_third() {
    let s = scores(
        &(0..30).map(f64::from).collect::<Vec<_>>(),
        Mode::SelfInfluence,
    );
    assert_eq!(select_bottom(&s, 1.0 / 3.0).unwrap().len(), 10);
    assert_eq!(select_bottom(&s, 0.0).unwrap().len(), 0);
    assert_eq!(select_bottom(&s, 1.0).unwrap().len(), 30);
    assert!(select_bottom(&s, 1.5).is_err());
}

#[test]
fn ties_break_by_ascending_id() {
    let s = scores(&[1.0, 0.0, 0.0, 0.0, 1.0], Mode::SelfInfluence);
    assert_eq!(select_bottom_n_ids(&s, 2), vec![1, 2]);
    let t = scores(&[-0.5, 0.5, 0.1, -0.1], Mode::Test);
    assert_eq!(select_bottom_n_ids(&t, 2), vec![2, 3]);
}

fn select_bottom_n_ids(s: &InfluenceScores, n: usize) -> Vec<usize> {
    lowimpact::filter::select_bottom_n(s, n)
        .into_iter()
        .collect()
}

#[test]
fn random_selection_overlap_matches_hypergeometric_mean() {
    // two independent size-n draws from N share n^2/N ids on average
    let pool: IdSet = (0..100).collect();
    let (n, trials) = (30usize, 2000u64);
    let overlaps: Vec<f64> = (0..trials)
        .map(|t| {
            let a = random_selection(&pool, n, 2 * t).unwrap();
            let b = random_selection(&pool, n, 2 * t + 1).unwrap();
            a.intersection(&b).count() as f64
        })
        .collect();
    let mean = overlaps.iter().sum::<f64>() / trials as f64;
    let (nn, big) = (n as f64, 100.0);
    let expected = nn * nn / big;
    let var = nn * (nn / big) * (1.0 - nn / big) * (big - nn) / (big - 1.0);
    let sigma = (var / trials as f64).sqrt();
    assert!(
        (mean - expected).abs() <= 3.0 * sigma,
        "{mean} vs {expected} +- {sigma}"
    );
    let j = expected / (2.0 * nn - expected);
    let mean_j = overlaps.iter().map(|m| m / (2.0 * nn - m)).sum::<f64>() / trials as f64;
    assert!((mean_j - j).abs() < 0.01, "{mean_j} vs {j}");
}

#[test]
fn cosine_qualifying_shrinks_with_stricter_thresholds() {
    let train = blobs(30, 3, 4, 1.5, 3);
    let forget: IdSet = (0..train.len()).step_by(4).map(|p| train.id(p)).collect();
    let spec = ForgetSpec::from_forget(&train, forget).unwrap();
    let vectors = similarity_vectors(&train, None).unwrap();
    let mut prev: Option<IdSet> = None;
    for c in [-1.0, 0.0, 0.5, 0.8, 0.9, 0.95, 0.99] {
        let q = cosine_qualifying(&train, &vectors, &spec, c, 3).unwrap();
        assert!(q.is_subset(&spec.forget_ids));
        if let Some(p) = &prev {
            assert!(q.is_subset(p), "c = {c}");
        }
        prev = Some(q);
    }
    let all = cosine_qualifying(&train, &vectors, &spec, -1.0, 1).unwrap();
    assert_eq!(all, spec.forget_ids);
    let mut prev = all;
    for k in [2, 5, 10, 40] {
        let q = cosine_qualifying(&train, &vectors, &spec, 0.9, k).unwrap();
        assert!(q.is_subset(&prev));
        prev = q;
    }
    let s1 = cosine_filter(&train, &vectors, &spec, 0.5, 3, 5, 7).unwrap();
    assert_eq!(
        s1,
        cosine_filter(&train, &vectors, &spec, 0.5, 3, 5, 7).unwrap()
    );
    assert_eq!(s1.len(), 5);
    assert!(cosine_filter(&train, &vectors, &spec, 1.0, 1000, 5, 7).is_err());
}

#[test]
fn zero_vectors_never_qualify() {
    let train = Dataset::new(
        vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.1, 0.0, 0.0],
        2,
        vec![0, 1, 0, 1],
        (0..4).collect(),
        2,
        Split::Train,
    )
    .unwrap();
    let spec = ForgetSpec::from_forget(&train, [0, 1].into()).unwrap();
    let vectors = similarity_vectors(&train, None).unwrap();
    // id 0 is the zero vector; id 3 is zero and does not count as a neighbour
    let q = cosine_qualifying(&train, &vectors, &spec, 0.9, 1).unwrap();
    assert_eq!(q, IdSet::from([1]));
    assert!(cosine_qualifying(&train, &vectors, &spec, 0.9, 2)
        .unwrap()
        .is_empty());
}

#[test]
fn low_influence_points_come_from_the_easy_class() {
    // class 0 is pushed far away from the two overlapping classes
    let base = blobs(40, 3, 3, 1.0, 17);
    let mut feats = base.features().to_vec();
    for p in 0..base.len() {
        if base.label(p) == 0 {
            feats[p * 3] += 6.0;
        }
    }
    let train = Dataset::new(
        feats,
        3,
        base.labels().to_vec(),
        base.ids().to_vec(),
        3,
        Split::Train,
    )
    .unwrap();
    let arch = Arch::LogisticRegression { dim: 3, classes: 3 };
    let model = fit(&train, arch, 0.01, &TrainConfig::default()).unwrap();
    let s = hessian_influence(
        &model,
        &train,
        Mode::SelfInfluence,
        None,
        &HessianConfig::default(),
    )
    .unwrap();
    let d_li = select_bottom(&s, 0.2).unwrap();
    let dist = class_distribution(&d_li, &train).unwrap();
    assert_eq!(dist.values().sum::<usize>(), d_li.len());
    assert!(dist[&0] * 3 > d_li.len(), "{dist:?}");
}

#[test]
fn agreement_matrix_is_symmetric_with_unit_diagonal() {
    let a = scores(&[0.1, 0.5, 0.3, 0.9, 0.7], Mode::SelfInfluence);
    let b = scores(&[0.2, 0.4, 0.1, 0.8, 0.9], Mode::SelfInfluence);
    let c = scores(&[0.9, 0.8, 0.7, 0.6, 0.5], Mode::Test);
    let m = AgreementMatrix::compute(vec!["a".into(), "b".into(), "c".into()], &[a, b, c], 0.4)
        .unwrap();
    for i in 0..3 {
        assert_eq!(m.jaccard[i][i], 1.0);
        assert_eq!(m.spearman[i][i], 1.0);
        for j in 0..3 {
            assert_eq!(m.jaccard[i][j], m.jaccard[j][i]);
            assert_eq!(m.spearman[i][j], m.spearman[j][i]);
        }
    }
    // bottom 2 of a = {0, 2}, of b = {0, 2}
    assert_eq!(m.jaccard[0][1], 1.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("agreement.csv");
    m.write_csv(&path, None).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text
        .lines()
        .next()
        .unwrap()
        .starts_with("method,a_jaccard,a_spearman"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn spearman_rejects_degenerate_inputs() {
    let a: BTreeMap<usize, f64> = [(0, 1.0), (1, 2.0)].into();
    let constant: BTreeMap<usize, f64> = [(0, 1.0), (1, 1.0)].into();
    let other_ids: BTreeMap<usize, f64> = [(0, 1.0), (2, 2.0)].into();
    let single: BTreeMap<usize, f64> = [(0, 1.0)].into();
    assert!(spearman_correlation(&a, &constant).is_err());
    assert!(spearman_correlation(&a, &other_ids).is_err());
    assert!(spearman_correlation(&single, &single).is_err());
    assert_eq!(spearman_correlation(&a, &a).unwrap(), 1.0);
}
