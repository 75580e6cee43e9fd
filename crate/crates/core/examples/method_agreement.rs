//! How much the influence methods agree: Jaccard overlap of their bottom
//! 20% and Spearman correlation of their scores.

use lowimpact::dataset::generate_gaussian_blobs;
use lowimpact::filter::AgreementMatrix;
use lowimpact::influence::{
    hessian_influence, less_influence, lowest_gradients_scores, select_snapshots, HessianConfig,
    LessConfig, Mode, DEFAULT_FROM_CHECKPOINT,
};
use lowimpact::model::Arch;
use lowimpact::trainer::{train, TrainConfig};

fn main() -> lowimpact::Result<()> {
    let data = generate_gaussian_blobs(100, 3, 5, 2.5, 6)?;
    let arch = Arch::LogisticRegression { dim: 5, classes: 3 };
    let outcome = train(&data, arch, 0.01, &TrainConfig::default())?;

    let scores = vec![
        hessian_influence(
            &outcome.params,
            &data,
            Mode::SelfInfluence,
            None,
            &HessianConfig::default(),
        )?,
        less_influence(
            &select_snapshots(&outcome.snapshots, DEFAULT_FROM_CHECKPOINT, 4),
            &data,
            Mode::SelfInfluence,
            None,
            &LessConfig::default(),
        )?,
        lowest_gradients_scores(&outcome.trace_l2, DEFAULT_FROM_CHECKPOINT)?,
        lowest_gradients_scores(&outcome.trace_linf, DEFAULT_FROM_CHECKPOINT)?,
    ];
    let labels = vec![
        "hessian".to_string(),
        "less".into(),
        "grad_l2".into(),
        "grad_linf".into(),
    ];
    let m = AgreementMatrix::compute(labels, &scores, 0.2)?;

    for (name, table) in [("Jaccard", &m.jaccard), ("Spearman", &m.spearman)] {
        println!("{name}");
        print!("{:>10}", "");
        for l in &m.labels {
            print!("{l:>10}");
        }
        println!();
        for (l, row) in m.labels.iter().zip(table) {
            print!("{l:>10}");
            for v in row {
                print!("{v:>10.3}");
            }
            println!();
        }
    }
    Ok(())
}
