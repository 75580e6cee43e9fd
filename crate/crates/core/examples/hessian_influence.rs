//! Self- and test-mode Hessian influence, plus the first-order prediction
//! of how removing a group changes the mean test loss.

use lowimpact::dataset::{generate_gaussian_blobs, IdSet, Split};
use lowimpact::filter::ranked_ids;
use lowimpact::influence::hessian::predicted_group_effect;
use lowimpact::influence::{hessian_influence, HessianConfig, Mode};
use lowimpact::model::Arch;
use lowimpact::trainer::{fit, TrainConfig};

fn main() -> lowimpact::Result<()> {
    let train = generate_gaussian_blobs(80, 2, 3, 1.5, 1)?;
    let test = generate_gaussian_blobs(40, 2, 3, 1.5, 2)?.with_split(Split::Test);
    let arch = Arch::LogisticRegression { dim: 3, classes: 2 };
    let lambda = 0.05;
    let cfg = TrainConfig::default();
    let model = fit(&train, arch, lambda, &cfg)?;
    let hcfg = HessianConfig::default();

    let self_scores = hessian_influence(&model, &train, Mode::SelfInfluence, None, &hcfg)?;
    let order = ranked_ids(&self_scores);
    println!("lowest self-influence ids:  {:?}", &order[..5]);
    println!(
        "highest self-influence ids: {:?}",
        &order[order.len() - 5..]
    );

    let test_scores = hessian_influence(&model, &train, Mode::Test, Some(&test), &hcfg)?;
    let helpful: IdSet = ranked_ids(&test_scores)
        .into_iter()
        .rev()
        .take(10)
        .collect();
    let predicted = predicted_group_effect(&model, &train, &test, &helpful, &hcfg)?;
    let retrained = fit(&train.without(&helpful)?, arch, lambda, &cfg)?;
    let actual = retrained.mean_loss(&test)? - model.mean_loss(&test)?;
    println!("removing the 10 most helpful points: predicted {predicted:+.5}, actual {actual:+.5}");
    Ok(())
}
