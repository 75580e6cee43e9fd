//! Drops the lowest-influence fraction of the training set before
//! unlearning and reports accuracies and wall-clock time for each
//! algorithm.

use lowimpact::dataset::{generate_gaussian_blobs, make_forget_spec, ForgetStrategy, Split};
use lowimpact::eval::{evaluate_accuracies, ReportSets};
use lowimpact::influence::{hessian_influence, HessianConfig, Mode};
use lowimpact::model::Arch;
use lowimpact::trainer::{fit, TrainConfig};
use lowimpact::unlearn::{filtered_unlearn, Fractions, UnlearnAlgorithm, UnlearnKind};

fn main() -> lowimpact::Result<()> {
    let train = generate_gaussian_blobs(150, 3, 5, 2.5, 10)?;
    let test = generate_gaussian_blobs(60, 3, 5, 2.5, 11)?.with_split(Split::Test);
    let arch = Arch::LogisticRegression { dim: 5, classes: 3 };
    let cfg = TrainConfig::default();
    let model = fit(&train, arch, 0.01, &cfg)?;
    let spec = make_forget_spec(&train, 0.1, ForgetStrategy::Random, 10)?;
    let scores = hessian_influence(
        &model,
        &train,
        Mode::SelfInfluence,
        None,
        &HessianConfig::default(),
    )?;

    let algorithms = [
        UnlearnKind::RetrainFull,
        UnlearnKind::FinetuneRetain {
            epochs: 20,
            learning_rate: 0.05,
        },
        UnlearnKind::NoiseFinetune {
            noise_sigma: 0.1,
            reinit_last_layer: false,
            epochs: 20,
            learning_rate: 0.05,
        },
    ];
    let forget_full = train.subset(&spec.forget_ids)?;
    let retain_full = train.subset(&spec.retain_ids)?;

    println!("algorithm        x    |S_HI|  |R_HI|  acc(S)  acc(R)  acc(test)  seconds");
    for kind in algorithms {
        let alg = UnlearnAlgorithm { kind, seed: 0 };
        for x in [0.0, 0.2, 0.4] {
            let (run, sel) = filtered_unlearn(
                &model,
                &train,
                &spec,
                &scores,
                Fractions::Combined { x },
                &alg,
                &cfg,
            )?;
            let sets = ReportSets {
                forget_full: &forget_full,
                forget_kept: &train.subset(&sel.s_hi)?,
                removed_li: &train.subset(&sel.selected)?,
                retain_full: &retain_full,
                test: &test,
            };
            let acc = evaluate_accuracies(&run.output, &sets)?;
            println!(
                "{:<15} {x:.1}  {:>6}  {:>6}  {:>6.3}  {:>6.3}  {:>9.3}  {:.4}",
                alg.name(),
                sel.s_hi.len(),
                sel.r_hi.len(),
                acc.forget_full.unwrap_or(f64::NAN),
                acc.retain_full.unwrap_or(f64::NAN),
                acc.test.unwrap_or(f64::NAN),
                run.wall_clock_seconds
            );
        }
    }
    Ok(())
}
