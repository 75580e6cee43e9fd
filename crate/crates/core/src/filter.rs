//! Low-influence selection, set reduction, baselines and agreement metrics.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{create_csv, finish_csv, ArtifactHeader};
use crate::dataset::{Dataset, ForgetSpec, IdSet, PointId};
use crate::error::{Error, Result};
use crate::influence::InfluenceScores;
use crate::model::{dot, norm2, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Baseline {
    None,
    Random { seed: u64 },
    Cosine { c: f64, k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub bottom_fraction: f64,
    pub baseline: Baseline,
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        check_fraction(self.bottom_fraction)?;
        if let Baseline::Cosine { c, k } = self.baseline {
            if k == 0 {
                return Err(Error::param("cosine baseline needs k >= 1"));
            }
            if !(-1.0..=1.0).contains(&c) {
                return Err(Error::param(format!(
                    "cosine threshold {c} outside [-1, 1]"
                )));
            }
        }
        Ok(())
    }
}

fn check_fraction(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::param(format!("fraction {x} outside [0, 1]")))
    }
}

/// `floor(x * n)`, robust to `x` values such as `1/3` whose product with
/// `n` lands a rounding error below an integer.
pub fn bottom_count(x: f64, n: usize) -> usize {
    ((x * n as f64) + 1e-9).floor().min(n as f64) as usize
}

/// Ids ordered by ascending effective score, ties by ascending id.
pub fn ranked_ids(scores: &InfluenceScores) -> Vec<PointId> {
    let mut ranked: Vec<(f64, PointId)> = scores
        .scores
        .iter()
        .map(|(&id, &s)| (scores.effective(s), id))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    ranked.into_iter().map(|(_, id)| id).collect()
}

/// The `floor(x * n)` lowest-influence ids (`D_LI`).
pub fn select_bottom(scores: &InfluenceScores, x: f64) -> Result<IdSet> {
    check_fraction(x)?;
    Ok(select_bottom_n(scores, bottom_count(x, scores.len())))
}

pub fn select_bottom_n(scores: &InfluenceScores, n: usize) -> IdSet {
    ranked_ids(scores).into_iter().take(n).collect()
}

/// The `floor(x * |within|)` lowest-influence ids among `within`.
pub fn select_bottom_within(scores: &InfluenceScores, within: &IdSet, x: f64) -> Result<IdSet> {
    check_fraction(x)?;
    let n = bottom_count(x, within.len());
    Ok(ranked_ids(scores)
        .into_iter()
        .filter(|id| within.contains(id))
        .take(n)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub selected: IdSet,
    pub s_hi: IdSet,
    pub r_hi: IdSet,
}

pub fn reduce_sets(spec: &ForgetSpec, d_li: &IdSet) -> SelectionResult {
    SelectionResult {
        selected: d_li.clone(),
        s_hi: spec.forget_ids.difference(d_li).copied().collect(),
        r_hi: spec.retain_ids.difference(d_li).copied().collect(),
    }
}

/// Seeded uniform sample of `count` ids from `pool`.
pub fn random_selection(pool: &IdSet, count: usize, seed: u64) -> Result<IdSet> {
    if count > pool.len() {
        return Err(Error::param(format!(
            "cannot sample {count} ids from a pool of {}",
            pool.len()
        )));
    }
    let ids: Vec<PointId> = pool.iter().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(index::sample(&mut rng, ids.len(), count)
        .into_iter()
        .map(|i| ids[i])
        .collect())
}

/// Vectors compared by the cosine baseline, aligned with dataset
/// positions: raw features, or the hidden layer of `model` when given.
pub fn similarity_vectors(train: &Dataset, model: Option<&ModelParams>) -> Result<Vec<Vec<f64>>> {
    (0..train.len())
        .map(|pos| match model {
            Some(m) => m.representation(train.row(pos)),
            None => Ok(train.row(pos).to_vec()),
        })
        .collect()
}

/// Forget points with at least `k` points of `D \ S` at cosine similarity
/// `>= c`. Zero vectors never qualify and never count as neighbours.
pub fn cosine_qualifying(
    train: &Dataset,
    vectors: &[Vec<f64>],
    spec: &ForgetSpec,
    c: f64,
    k: usize,
) -> Result<IdSet> {
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    if vectors.len() != train.len() {
        return Err(Error::Shape {
            expected: train.len(),
            got: vectors.len(),
        });
    }
    let norms: Vec<f64> = vectors.iter().map(|v| norm2(v)).collect();
    let zero = norms.iter().filter(|&&n| n == 0.0).count();
    if zero > 0 {
        log::warn!("{zero} zero-norm vectors excluded from cosine similarity");
    }
    let forget = train.positions_of(&spec.forget_ids)?;
    let others: Vec<usize> = (0..train.len())
        .filter(|&p| !spec.forget_ids.contains(&train.id(p)) && norms[p] > 0.0)
        .collect();
    Ok(forget
        .par_iter()
        .filter(|&&s| {
            norms[s] > 0.0
                && others
                    .iter()
                    .filter(|&&o| dot(&vectors[s], &vectors[o]) / (norms[s] * norms[o]) >= c)
                    .take(k)
                    .count()
                    >= k
        })
        .map(|&s| train.id(s))
        .collect::<Vec<_>>()
        .into_iter()
        .collect())
}

/// Seeded uniform sample of `sample_n` cosine-qualifying forget points.
pub fn cosine_filter(
    train: &Dataset,
    vectors: &[Vec<f64>],
    spec: &ForgetSpec,
    c: f64,
    k: usize,
    sample_n: usize,
    seed: u64,
) -> Result<IdSet> {
    let qualifying = cosine_qualifying(train, vectors, spec, c, k)?;
    if qualifying.len() < sample_n {
        return Err(Error::param(format!(
            "only {} points qualify at c={c}, k={k}; {sample_n} requested",
            qualifying.len()
        )));
    }
    random_selection(&qualifying, sample_n, seed)
}

/// `|a & b| / |a | b|`, and 1 for two empty sets.
pub fn jaccard_similarity(a: &IdSet, b: &IdSet) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// 1-based ranks; tied values share the mean of their ranks.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation of two score maps over the same ids.
pub fn spearman_correlation(a: &BTreeMap<PointId, f64>, b: &BTreeMap<PointId, f64>) -> Result<f64> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::param("score maps cover different ids"));
    }
    if a.len() < 2 {
        return Err(Error::param("rank correlation needs at least two points"));
    }
    let va: Vec<f64> = a.values().copied().collect();
    let vb: Vec<f64> = b.values().copied().collect();
    pearson(&average_ranks(&va), &average_ranks(&vb))
        .ok_or_else(|| Error::param("rank correlation is undefined for constant scores"))
}

/// Count per class (every class present, zero or not).
pub fn class_distribution(d_li: &IdSet, train: &Dataset) -> Result<BTreeMap<usize, usize>> {
    let mut counts: BTreeMap<usize, usize> = (0..train.n_classes()).map(|c| (c, 0)).collect();
    for pos in train.positions_of(d_li)? {
        *counts.entry(train.label(pos)).or_default() += 1;
    }
    Ok(counts)
}

/// Pairwise Jaccard similarity of bottom-`x` selections and Spearman
/// correlation of effective scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub labels: Vec<String>,
    pub bottom_fraction: f64,
    pub jaccard: Vec<Vec<f64>>,
    pub spearman: Vec<Vec<f64>>,
}

impl AgreementMatrix {
    pub fn compute(labels: Vec<String>, scores: &[InfluenceScores], x: f64) -> Result<Self> {
        if labels.len() != scores.len() {
            return Err(Error::Shape {
                expected: scores.len(),
                got: labels.len(),
            });
        }
        let selections = scores
            .iter()
            .map(|s| select_bottom(s, x))
            .collect::<Result<Vec<_>>>()?;
        let effective: Vec<BTreeMap<PointId, f64>> = scores
            .iter()
            .map(|s| {
                s.scores
                    .iter()
                    .map(|(&id, &v)| (id, s.effective(v)))
                    .collect()
            })
            .collect();
        let m = scores.len();
        let mut jaccard = vec![vec![0.0; m]; m];
        let mut spearman = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in 0..m {
                jaccard[i][j] = jaccard_similarity(&selections[i], &selections[j]);
                spearman[i][j] = if i == j {
                    1.0
                } else {
                    spearman_correlation(&effective[i], &effective[j])?
                };
            }
        }
        Ok(Self {
            labels,
            bottom_fraction: x,
            jaccard,
            spearman,
        })
    }

    /// One row per method; each other method contributes a `_jaccard` and
    /// a `_spearman` column.
    pub fn write_csv(&self, path: &Path, header: Option<&ArtifactHeader>) -> Result<()> {
        let mut wtr = create_csv(path, header)?;
        let mut head = vec!["method".to_string()];
        for l in &self.labels {
            head.push(format!("{l}_jaccard"));
            head.push(format!("{l}_spearman"));
        }
        wtr.write_record(&head)?;
        for (i, l) in self.labels.iter().enumerate() {
            let mut row = vec![l.clone()];
            for j in 0..self.labels.len() {
                row.push(self.jaccard[i][j].to_string());
                row.push(self.spearman[i][j].to_string());
            }
            wtr.write_record(&row)?;
        }
        finish_csv(wtr, path)
    }
}
