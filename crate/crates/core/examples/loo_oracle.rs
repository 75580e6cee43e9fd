//! Exact leave-one-out retraining as a reference for approximate scores:
//! label memorisation of an outlier and a rank comparison against the
//! Hessian approximation.

use std::collections::BTreeMap;

use lowimpact::dataset::{generate_gaussian_blobs, Dataset, Split};
use lowimpact::filter::spearman_correlation;
use lowimpact::influence::{
    hessian_influence, memorization_score, HessianConfig, LooOracle, Mode, OracleValue,
};
use lowimpact::model::Arch;
use lowimpact::trainer::{fit, TrainConfig};

fn main() -> lowimpact::Result<()> {
    let base = generate_gaussian_blobs(20, 2, 3, 2.0, 11)?;
    // a class-0 point placed deep on the far side of the class-1 blob
    let mut features = base.features().to_vec();
    features.extend_from_slice(&[-1.0, 3.0, -16.0]);
    let mut labels = base.labels().to_vec();
    labels.push(0);
    let outlier = base.len();
    let ids = (0..=base.len()).collect();
    let data = Dataset::new(features, 3, labels, ids, 2, Split::Train)?;

    let arch = Arch::LogisticRegression { dim: 3, classes: 2 };
    let lambda = 0.001;
    let cfg = TrainConfig::default();
    let mem = memorization_score(&data, outlier, arch, lambda, &cfg, 3)?;
    println!("memorisation of the outlier: {mem:.2}");
    let mem0 = memorization_score(&data, 0, arch, lambda, &cfg, 3)?;
    println!("memorisation of a typical point: {mem0:.2}");

    let train = generate_gaussian_blobs(40, 2, 4, 1.0, 12)?;
    let arch = Arch::LogisticRegression { dim: 4, classes: 2 };
    let lambda = 0.1;
    let oracle = LooOracle::new(&train, arch, lambda, &cfg, 3)?;
    let loo: BTreeMap<_, _> = train
        .ids()
        .iter()
        .map(|&id| Ok((id, oracle.self_influence(id, OracleValue::Loss)?)))
        .collect::<lowimpact::Result<_>>()?;
    let model = fit(&train, arch, lambda, &cfg)?;
    let approx = hessian_influence(
        &model,
        &train,
        Mode::SelfInfluence,
        None,
        &HessianConfig::default(),
    )?;
    println!(
        "Spearman(Hessian self, loss-valued LOO) = {:.4}",
        spearman_correlation(&approx.scores, &loo)?
    );
    Ok(())
}
