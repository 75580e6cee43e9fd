//! Scores points by the largest gradient norm they show late in training
//! and tracks how many points sit below the early-training 5th percentile.

use lowimpact::dataset::generate_gaussian_blobs;
use lowimpact::filter::ranked_ids;
use lowimpact::influence::{
    low_gradient_count_curve, lowest_gradients_scores, DEFAULT_FROM_CHECKPOINT,
};
use lowimpact::model::Arch;
use lowimpact::trainer::{train, TrainConfig};

fn main() -> lowimpact::Result<()> {
    let data = generate_gaussian_blobs(100, 3, 5, 2.5, 5)?;
    let arch = Arch::LogisticRegression { dim: 5, classes: 3 };
    let outcome = train(&data, arch, 0.01, &TrainConfig::default())?;

    for trace in [&outcome.trace_l2, &outcome.trace_linf] {
        let scores = lowest_gradients_scores(trace, DEFAULT_FROM_CHECKPOINT)?;
        println!(
            "{}: lowest ids {:?}",
            trace.norm_kind.tag(),
            &ranked_ids(&scores)[..5]
        );
    }

    let curve = low_gradient_count_curve(&outcome.trace_l2, 5.0)?;
    println!("epoch  points below threshold");
    // the count settles within the dense early checkpoints
    for c in curve.iter().take(16) {
        println!("{:>5}  {}", c.epoch, c.count);
    }
    Ok(())
}
