//! Retrains without the lowest-influence points and compares accuracy on
//! the removed points against removing the same number at random.

use lowimpact::dataset::{generate_gaussian_blobs, Split};
use lowimpact::eval::removal_curve;
use lowimpact::influence::{hessian_influence, HessianConfig, Mode};
use lowimpact::model::Arch;
use lowimpact::trainer::{fit, TrainConfig};

fn main() -> lowimpact::Result<()> {
    let train = generate_gaussian_blobs(150, 3, 5, 2.5, 7)?;
    let test = generate_gaussian_blobs(60, 3, 5, 2.5, 8)?.with_split(Split::Test);
    let arch = Arch::LogisticRegression { dim: 5, classes: 3 };
    let lambda = 0.01;
    let cfg = TrainConfig::default();
    let model = fit(&train, arch, lambda, &cfg)?;
    let scores = hessian_influence(
        &model,
        &train,
        Mode::SelfInfluence,
        None,
        &HessianConfig::default(),
    )?;

    let sizes = [0, 10, 20, 40, 80];
    let curve = removal_curve(&train, &test, &scores, &sizes, arch, lambda, &cfg, 1)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.3}"));
    println!("removed  acc(removed)  acc(random)  acc(test)");
    for p in curve {
        println!(
            "{:>7}  {:>12}  {:>11}  {:>9.3}",
            p.n_removed,
            fmt(p.acc_removed),
            fmt(p.acc_removed_random),
            p.acc_test
        );
    }
    Ok(())
}
