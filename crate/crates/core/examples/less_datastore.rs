//! LESS-style scores: projected, optimizer-aware gradients gathered over
//! several checkpoints of an Adam run.

use lowimpact::dataset::{generate_gaussian_blobs, Split};
use lowimpact::filter::{ranked_ids, spearman_correlation};
use lowimpact::influence::{
    hessian_influence, less_influence, select_snapshots, HessianConfig, LessConfig, Mode,
};
use lowimpact::model::Arch;
use lowimpact::trainer::{train, Optimizer, TrainConfig};

fn main() -> lowimpact::Result<()> {
    let data = generate_gaussian_blobs(60, 3, 4, 2.5, 3)?;
    let test = generate_gaussian_blobs(20, 3, 4, 2.5, 4)?.with_split(Split::Test);
    let arch = Arch::LogisticRegression { dim: 4, classes: 3 };
    let cfg = TrainConfig {
        optimizer: Optimizer::Adam,
        learning_rate: 0.01,
        epochs: 400,
        checkpoint_every: 20,
        ..TrainConfig::default()
    };
    let outcome = train(&data, arch, 0.01, &cfg)?;
    let snaps = select_snapshots(&outcome.snapshots, 5, 4);
    println!(
        "datastore built from epochs {:?}",
        snaps.iter().map(|s| s.epoch).collect::<Vec<_>>()
    );

    let less_cfg = LessConfig {
        projection_dim: 256,
        ..LessConfig::default()
    };
    let self_scores = less_influence(&snaps, &data, Mode::SelfInfluence, None, &less_cfg)?;
    let test_scores = less_influence(&snaps, &data, Mode::Test, Some(&test), &less_cfg)?;
    println!(
        "lowest LESS self scores: {:?}",
        &ranked_ids(&self_scores)[..5]
    );
    println!(
        "lowest LESS test scores: {:?}",
        &ranked_ids(&test_scores)[..5]
    );

    let hessian = hessian_influence(
        &outcome.params,
        &data,
        Mode::SelfInfluence,
        None,
        &HessianConfig::default(),
    );
    match hessian {
        Ok(h) => println!(
            "Spearman(LESS self, Hessian self) = {:.3}",
            spearman_correlation(&self_scores.scores, &h.scores)?
        ),
        Err(e) => println!("Hessian scores unavailable: {e}"),
    }
    Ok(())
}
