//! Trains a logistic-regression model on Gaussian blobs and writes the
//! per-point gradient-norm traces.
//!
//! `cargo run --release --example train_and_trace -- /tmp/traces`

use std::path::PathBuf;

use lowimpact::dataset::generate_gaussian_blobs;
use lowimpact::model::Arch;
use lowimpact::trainer::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "traces".into()));
    std::fs::create_dir_all(&out)?;

    let data = generate_gaussian_blobs(100, 3, 4, 2.5, 0)?;
    let arch = Arch::LogisticRegression { dim: 4, classes: 3 };
    let outcome = train(&data, arch, 0.01, &TrainConfig::default())?;

    println!(
        "{} epochs, converged={}, final gradient norm {:.2e}, train accuracy {:.3}",
        outcome.epochs_run,
        outcome.converged,
        outcome.final_grad_norm,
        outcome.params.accuracy_on(&data)?
    );
    println!("{} checkpoints recorded", outcome.snapshots.len());

    outcome
        .trace_l2
        .write_csv(&out.join("trace_l2.csv"), None)?;
    outcome
        .trace_linf
        .write_csv(&out.join("trace_linf.csv"), None)?;
    println!("traces written to {}", out.display());
    Ok(())
}
