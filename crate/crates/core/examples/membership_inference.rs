//! Membership inference on the forget set before and after unlearning.
//! An attack accuracy near 0.5 means forget points look like unseen data.

use lowimpact::dataset::{generate_gaussian_blobs, make_forget_spec, ForgetStrategy, Split};
use lowimpact::eval::{mia_attack_with, MiaFeatures};
use lowimpact::model::Arch;
use lowimpact::trainer::{fit, TrainConfig};
use lowimpact::unlearn::{unlearn, UnlearnAlgorithm, UnlearnKind};

fn main() -> lowimpact::Result<()> {
    let train = generate_gaussian_blobs(300, 3, 5, 1.5, 12)?;
    let test = generate_gaussian_blobs(150, 3, 5, 1.5, 13)?.with_split(Split::Test);
    let arch = Arch::Mlp {
        dim: 5,
        hidden: 32,
        classes: 3,
    };
    let cfg = TrainConfig {
        learning_rate: 0.5,
        epochs: 3000,
        ..TrainConfig::default()
    };
    let model = fit(&train, arch, 1e-4, &cfg)?;
    let spec = make_forget_spec(&train, 0.25, ForgetStrategy::Random, 12)?;
    let forget = train.subset(&spec.forget_ids)?;

    let alg = UnlearnAlgorithm {
        kind: UnlearnKind::RetrainFull,
        seed: 1,
    };
    let run = unlearn(
        &model,
        &train,
        &spec.forget_ids,
        &spec.retain_ids,
        &alg,
        &cfg,
    )?;

    for features in [MiaFeatures::PerSampleLoss, MiaFeatures::Logits] {
        for (name, m) in [("original", &model), ("retrained", &run.output)] {
            let r = mia_attack_with(m, &forget, &test, 5, 0, features)?;
            println!(
                "{features:?} {name:<9} attack accuracy {:.3} +- {:.3}",
                r.attack_accuracy, r.ci95_halfwidth
            );
        }
    }
    Ok(())
}
