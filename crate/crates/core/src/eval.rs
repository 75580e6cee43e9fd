//! Accuracy, membership inference, unlearning reports and removal curves.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{create_csv, finish_csv, fmt_opt, open_csv, parse_opt, ArtifactHeader};
use crate::dataset::{Dataset, IdSet};
use crate::error::{Error, Result};
use crate::filter::{random_selection, select_bottom_n};
use crate::influence::InfluenceScores;
use crate::model::{Arch, ModelParams};
use crate::trainer::{fit, TrainConfig};

/// Fraction of argmax-correct predictions on a nonempty set.
pub fn accuracy(model: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("accuracy of an empty set is undefined"));
    }
    model.accuracy_on(data)
}

fn accuracy_opt(model: &ModelParams, data: &Dataset) -> Result<Option<f64>> {
    if data.is_empty() {
        Ok(None)
    } else {
        accuracy(model, data).map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiaFeatures {
    /// Cross-entropy of the true label.
    #[default]
    PerSampleLoss,
    /// The full logit vector.
    Logits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MIAResult {
    pub attack_accuracy: f64,
    pub stderr: f64,
    pub ci95_halfwidth: f64,
    pub n_folds: usize,
    /// Points per class after balancing.
    pub n_per_class: usize,
    pub feature_kind: MiaFeatures,
}

fn attack_features(
    model: &ModelParams,
    data: &Dataset,
    kind: MiaFeatures,
) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .map(|pos| match kind {
            MiaFeatures::PerSampleLoss => {
                Ok(vec![model.cross_entropy(data.row(pos), data.label(pos))?])
            }
            MiaFeatures::Logits => model.logits(data.row(pos)),
        })
        .collect()
}

/// Logistic regression with intercept, fitted by Newton's method on
/// standardised features. A tiny ridge keeps separable data finite.
struct Attacker {
    mean: Vec<f64>,
    scale: Vec<f64>,
    coef: DVector<f64>,
}

impl Attacker {
    const RIDGE: f64 = 1e-6;

    fn design_row(&self, x: &[f64]) -> DVector<f64> {
        let mut row = Vec::with_capacity(x.len() + 1);
        row.push(1.0);
        row.extend(
            x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .map(|((v, m), s)| (v - m) / s),
        );
        DVector::from_vec(row)
    }

    fn fit(xs: &[&Vec<f64>], ys: &[f64]) -> Self {
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mut mean = vec![0.0; d];
        for x in xs {
            for (m, v) in mean.iter_mut().zip(x.iter()) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for x in xs {
            for ((s, v), m) in scale.iter_mut().zip(x.iter()).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let mut att = Self {
            mean,
            scale,
            coef: DVector::zeros(d + 1),
        };
        let rows: Vec<DVector<f64>> = xs.iter().map(|x| att.design_row(x)).collect();
        for _ in 0..100 {
            let mut grad = &att.coef * Self::RIDGE;
            let mut hess = DMatrix::<f64>::identity(d + 1, d + 1) * Self::RIDGE;
            for (row, &y) in rows.iter().zip(ys) {
                let p = 1.0 / (1.0 + (-row.dot(&att.coef)).exp());
                grad += row * (p - y);
                hess += row * row.transpose() * (p * (1.0 - p));
            }
            let Some(step) = hess.cholesky().map(|c| c.solve(&grad)) else {
                break;
            };
            att.coef -= &step;
            if step.norm() < 1e-10 {
                break;
            }
        }
        att
    }

    fn predicts_member(&self, x: &[f64]) -> bool {
        self.design_row(x).dot(&self.coef) > 0.0
    }
}

/// Membership inference on a balanced sample of forget (member) and test
/// (non-member) points, scored by stratified `n_folds`-fold
/// cross-validation of a logistic-regression attacker.
pub fn mia_attack(
    model: &ModelParams,
    forget: &Dataset,
    test: &Dataset,
    n_folds: usize,
    seed: u64,
) -> Result<MIAResult> {
    mia_attack_with(
        model,
        forget,
        test,
        n_folds,
        seed,
        MiaFeatures::PerSampleLoss,
    )
}

pub fn mia_attack_with(
    model: &ModelParams,
    forget: &Dataset,
    test: &Dataset,
    n_folds: usize,
    seed: u64,
    features: MiaFeatures,
) -> Result<MIAResult> {
    if forget.is_empty() || test.is_empty() {
        return Err(Error::param(
            "membership inference needs nonempty member and non-member sets",
        ));
    }
    let members = attack_features(model, forget, features)?;
    let non_members = attack_features(model, test, features)?;
    mia_from_features(&members, &non_members, n_folds, seed, features)
}

/// The attack on precomputed feature rows.
pub fn mia_from_features(
    members: &[Vec<f64>],
    non_members: &[Vec<f64>],
    n_folds: usize,
    seed: u64,
    feature_kind: MiaFeatures,
) -> Result<MIAResult> {
    if n_folds < 2 {
        return Err(Error::param("n_folds must be at least 2"));
    }
    let m = members.len().min(non_members.len());
    if m < n_folds {
        return Err(Error::param(format!(
            "{m} points per class is too few for {n_folds} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: &[Vec<f64>]| -> Vec<usize> {
        let mut picked = index::sample(&mut rng, rows.len(), m).into_vec();
        picked.shuffle(&mut rng);
        picked
    };
    let mem_idx = draw(members);
    let non_idx = draw(non_members);

    // (features, label, fold); folds stratified by class
    let mut pool: Vec<(&Vec<f64>, f64, usize)> = Vec::with_capacity(2 * m);
    for (i, &k) in mem_idx.iter().enumerate() {
        pool.push((&members[k], 1.0, i % n_folds));
    }
    for (i, &k) in non_idx.iter().enumerate() {
        pool.push((&non_members[k], 0.0, i % n_folds));
    }

    let fold_acc: Vec<f64> = (0..n_folds)
        .map(|fold| {
            let (xs, ys): (Vec<&Vec<f64>>, Vec<f64>) = pool
                .iter()
                .filter(|p| p.2 != fold)
                .map(|p| (p.0, p.1))
                .unzip();
            let attacker = Attacker::fit(&xs, &ys);
            let held: Vec<_> = pool.iter().filter(|p| p.2 == fold).collect();
            let correct = held
                .iter()
                .filter(|p| attacker.predicts_member(p.0) == (p.1 == 1.0))
                .count();
            correct as f64 / held.len() as f64
        })
        .collect();

    let k = n_folds as f64;
    let mean = fold_acc.iter().sum::<f64>() / k;
    let var = fold_acc
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / (k - 1.0);
    let stderr = var.sqrt() / k.sqrt();
    Ok(MIAResult {
        attack_accuracy: mean,
        stderr,
        ci95_halfwidth: 1.96 * stderr,
        n_folds,
        n_per_class: m,
        feature_kind,
    })
}

/// Accuracies reported for one unlearning run. Sets that come out empty
/// (for example the kept forget points at `x = 1`) have no accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportAccuracies {
    /// Original forget set `S`.
    pub forget_full: Option<f64>,
    /// `S_HI`, the forget points actually unlearned.
    pub forget_kept: Option<f64>,
    /// `D_LI`, the points filtered out.
    pub removed_li: Option<f64>,
    /// Original retain set `R`.
    pub retain_full: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub method: String,
    pub mode: String,
    pub algorithm: String,
    pub x: f64,
    pub seed: u64,
    pub n_forget_kept: usize,
    pub n_retain_kept: usize,
    pub n_removed: usize,
    pub accuracies: ReportAccuracies,
    pub mia: MIAResult,
    pub wall_clock_seconds: f64,
    pub output_checksum: String,
    pub checkpoint: Option<String>,
}

/// Sets needed to evaluate one run.
pub struct ReportSets<'a> {
    pub forget_full: &'a Dataset,
    pub forget_kept: &'a Dataset,
    pub removed_li: &'a Dataset,
    pub retain_full: &'a Dataset,
    pub test: &'a Dataset,
}

pub fn evaluate_accuracies(model: &ModelParams, sets: &ReportSets<'_>) -> Result<ReportAccuracies> {
    Ok(ReportAccuracies {
        forget_full: accuracy_opt(model, sets.forget_full)?,
        forget_kept: accuracy_opt(model, sets.forget_kept)?,
        removed_li: accuracy_opt(model, sets.removed_li)?,
        retain_full: accuracy_opt(model, sets.retain_full)?,
        test: accuracy_opt(model, sets.test)?,
    })
}

pub const REPORT_COLUMNS: [&str; 16] = [
    "method",
    "mode",
    "algorithm",
    "x",
    "seed",
    "n_forget_kept",
    "n_retain_kept",
    "n_removed",
    "acc_forget_full",
    "acc_forget_kept",
    "acc_removed_li",
    "acc_retain_full",
    "acc_test",
    "mia_acc",
    "mia_ci",
    "mia_stderr",
];

/// Flat CSV of reports. Wall-clock times go to the sibling file written by
/// [`write_timings_csv`] so this file is reproducible byte for byte.
pub fn write_reports_csv(
    path: &Path,
    reports: &[UnlearnReport],
    header: Option<&ArtifactHeader>,
) -> Result<()> {
    let mut wtr = create_csv(path, header)?;
    wtr.write_record(REPORT_COLUMNS)?;
    for r in reports {
        let a = &r.accuracies;
        wtr.write_record([
            r.method.clone(),
            r.mode.clone(),
            r.algorithm.clone(),
            r.x.to_string(),
            r.seed.to_string(),
            r.n_forget_kept.to_string(),
            r.n_retain_kept.to_string(),
            r.n_removed.to_string(),
            fmt_opt(a.forget_full),
            fmt_opt(a.forget_kept),
            fmt_opt(a.removed_li),
            fmt_opt(a.retain_full),
            fmt_opt(a.test),
            r.mia.attack_accuracy.to_string(),
            r.mia.ci95_halfwidth.to_string(),
            r.mia.stderr.to_string(),
        ])?;
    }
    finish_csv(wtr, path)
}

pub fn write_timings_csv(
    path: &Path,
    reports: &[UnlearnReport],
    header: Option<&ArtifactHeader>,
) -> Result<()> {
    let mut wtr = create_csv(path, header)?;
    wtr.write_record(["method", "mode", "algorithm", "x", "seed", "seconds"])?;
    for r in reports {
        wtr.write_record([
            r.method.clone(),
            r.mode.clone(),
            r.algorithm.clone(),
            r.x.to_string(),
            r.seed.to_string(),
            r.wall_clock_seconds.to_string(),
        ])?;
    }
    finish_csv(wtr, path)
}

/// One parsed row of the report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub mode: String,
    pub algorithm: String,
    pub x: f64,
    pub seed: u64,
    pub n_forget_kept: usize,
    pub n_retain_kept: usize,
    pub n_removed: usize,
    pub accuracies: ReportAccuracies,
    pub mia_acc: f64,
    pub mia_ci: f64,
    pub mia_stderr: f64,
}

impl From<&UnlearnReport> for ReportRow {
    fn from(r: &UnlearnReport) -> Self {
        Self {
            method: r.method.clone(),
            mode: r.mode.clone(),
            algorithm: r.algorithm.clone(),
            x: r.x,
            seed: r.seed,
            n_forget_kept: r.n_forget_kept,
            n_retain_kept: r.n_retain_kept,
            n_removed: r.n_removed,
            accuracies: r.accuracies,
            mia_acc: r.mia.attack_accuracy,
            mia_ci: r.mia.ci95_halfwidth,
            mia_stderr: r.mia.stderr,
        }
    }
}

pub fn read_reports_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut rdr = open_csv(path)?;
    let head = rdr.headers()?.clone();
    if head.iter().ne(REPORT_COLUMNS) {
        return Err(Error::param(format!(
            "{} does not have report columns",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |c: &str| Error::param(format!("bad {c} in {}", path.display()));
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|_| bad(REPORT_COLUMNS[i])) };
        let int =
            |i: usize| -> Result<usize> { rec[i].parse().map_err(|_| bad(REPORT_COLUMNS[i])) };
        rows.push(ReportRow {
            method: rec[0].to_string(),
            mode: rec[1].to_string(),
            algorithm: rec[2].to_string(),
            x: num(3)?,
            seed: rec[4].parse().map_err(|_| bad("seed"))?,
            n_forget_kept: int(5)?,
            n_retain_kept: int(6)?,
            n_removed: int(7)?,
            accuracies: ReportAccuracies {
                forget_full: parse_opt(&rec[8])?,
                forget_kept: parse_opt(&rec[9])?,
                removed_li: parse_opt(&rec[10])?,
                retain_full: parse_opt(&rec[11])?,
                test: parse_opt(&rec[12])?,
            },
            mia_acc: num(13)?,
            mia_ci: num(14)?,
            mia_stderr: num(15)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_removed: usize,
    /// Retrained model on the removed points; `None` when nothing is removed.
    pub acc_removed: Option<f64>,
    pub acc_test: f64,
    /// Unremoved model on the same points.
    pub acc_removed_base: Option<f64>,
    pub acc_removed_random: Option<f64>,
    pub acc_test_random: f64,
}

/// Retrains without the `n` lowest-influence points for each `n` in
/// `sizes` and measures accuracy on the removed points, next to a random
/// removal of the same size.
#[allow(clippy::too_many_arguments)]
pub fn removal_curve(
    train: &Dataset,
    test: &Dataset,
    scores: &InfluenceScores,
    sizes: &[usize],
    arch: Arch,
    l2_lambda: f64,
    config: &TrainConfig,
    random_seed: u64,
) -> Result<Vec<CurvePoint>> {
    if !scores.covers(train) {
        return Err(Error::param("scores do not cover the training set"));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("removal sizes must be strictly ascending"));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n >= train.len()) {
        return Err(Error::param(format!(
            "cannot remove {n} of {} points",
            train.len()
        )));
    }
    let base = fit(train, arch, l2_lambda, config)?;
    let base_test = accuracy(&base, test)?;
    let all = train.id_set();
    sizes
        .par_iter()
        .map(|&n| {
            if n == 0 {
                return Ok(CurvePoint {
                    n_removed: 0,
                    acc_removed: None,
                    acc_test: base_test,
                    acc_removed_base: None,
                    acc_removed_random: None,
                    acc_test_random: base_test,
                });
            }
            let run = |removed: &IdSet| -> Result<(f64, f64, f64)> {
                let model = fit(&train.without(removed)?, arch, l2_lambda, config)?;
                let held = train.subset(removed)?;
                Ok((
                    accuracy(&model, &held)?,
                    accuracy(&model, test)?,
                    accuracy(&base, &held)?,
                ))
            };
            let (acc_removed, acc_test, acc_base) = run(&select_bottom_n(scores, n))?;
            let (acc_rand, acc_test_rand, _) = run(&random_selection(&all, n, random_seed)?)?;
            Ok(CurvePoint {
                n_removed: n,
                acc_removed: Some(acc_removed),
                acc_test,
                acc_removed_base: Some(acc_base),
                acc_removed_random: Some(acc_rand),
                acc_test_random: acc_test_rand,
            })
        })
        .collect()
}

/// Columns `method,n_removed,acc_removed,acc_test,acc_removed_random`.
pub fn write_curve_csv(
    path: &Path,
    method: &str,
    curve: &[CurvePoint],
    header: Option<&ArtifactHeader>,
) -> Result<()> {
    let mut wtr = create_csv(path, header)?;
    wtr.write_record([
        "method",
        "n_removed",
        "acc_removed",
        "acc_test",
        "acc_removed_random",
    ])?;
    for p in curve {
        wtr.write_record([
            method.to_string(),
            p.n_removed.to_string(),
            fmt_opt(p.acc_removed),
            p.acc_test.to_string(),
            fmt_opt(p.acc_removed_random),
        ])?;
    }
    finish_csv(wtr, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Split;

    #[test]
    fn empty_set_accuracy_is_an_error() {
        let arch = Arch::LogisticRegression { dim: 1, classes: 2 };
        let m = ModelParams::zeros(arch, 0.0);
        let empty = Dataset::new(vec![], 1, vec![], vec![], 2, Split::Test).unwrap();
        assert!(accuracy(&m, &empty).is_err());
    }

    #[test]
    fn constant_predictor_on_its_class() {
        let arch = Arch::LogisticRegression { dim: 1, classes: 2 };
        // bias of class 1 dominates
        let m = ModelParams::new(arch, 0.0, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let d = Dataset::new(vec![0.3, -2.0], 1, vec![1, 1], vec![0, 1], 2, Split::Test).unwrap();
        assert_eq!(accuracy(&m, &d).unwrap(), 1.0);
    }

    #[test]
    fn separated_losses_are_detected() {
        let members = vec![vec![0.0]; 50];
        let non = vec![vec![10.0]; 50];
        let r = mia_from_features(&members, &non, 10, 1, MiaFeatures::PerSampleLoss).unwrap();
        assert_eq!(r.attack_accuracy, 1.0);
        assert_eq!(r.ci95_halfwidth, 1.96 * r.stderr);
    }

    #[test]
    fn too_few_points_for_folds() {
        let r = mia_from_features(
            &vec![vec![0.0]; 5],
            &vec![vec![1.0]; 50],
            10,
            1,
            MiaFeatures::PerSampleLoss,
        );
        assert!(r.is_err());
    }
}
