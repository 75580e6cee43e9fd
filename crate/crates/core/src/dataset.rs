//! Labelled point clouds, CSV ingestion and forget/retain partitions.
//!
//! A [`Dataset`] stores features row-major as `f64`, integer labels in
//! `[0, C)`, and stable point ids. Ids survive subsetting, so scores,
//! selections and forget sets always refer to points by id rather than
//! by position.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type PointId = usize;
pub type IdSet = BTreeSet<PointId>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    ids: Vec<PointId>,
    n_classes: usize,
    split: Split,
    index: HashMap<PointId, usize>,
}

impl Dataset {
    /// Builds a dataset from row-major features. `n_classes` must be at
    /// least 2 and larger than every label.
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        ids: Vec<PointId>,
        n_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("feature dimension must be at least 1"));
        }
        if n_classes < 2 {
            return Err(Error::param("at least two classes are required"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Shape {
                expected: labels.len() * dim,
                got: features.len(),
            });
        }
        if ids.len() != labels.len() {
            return Err(Error::Shape {
                expected: labels.len(),
                got: ids.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::param(format!(
                "label {bad} outside [0, {n_classes})"
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("features must be finite"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            if index.insert(id, pos).is_some() {
                return Err(Error::param(format!("duplicate point id {id}")));
            }
        }
        Ok(Self {
            features,
            dim,
            labels,
            ids,
            n_classes,
            split,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[PointId] {
        &self.ids
    }

    pub fn id_set(&self) -> IdSet {
        self.ids.iter().copied().collect()
    }

    pub fn row(&self, pos: usize) -> &[f64] {
        &self.features[pos * self.dim..(pos + 1) * self.dim]
    }

    pub fn label(&self, pos: usize) -> usize {
        self.labels[pos]
    }

    pub fn id(&self, pos: usize) -> PointId {
        self.ids[pos]
    }

    pub fn position(&self, id: PointId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn contains(&self, id: PointId) -> bool {
        self.index.contains_key(&id)
    }

    /// Positions of `ids`, failing on any id not present.
    pub fn positions_of<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a PointId>,
    ) -> Result<Vec<usize>> {
        ids.into_iter()
            .map(|id| {
                self.position(*id)
                    .ok_or_else(|| Error::param(format!("point id {id} not in dataset")))
            })
            .collect()
    }

    /// Keeps rows at the given positions, in the given order.
    pub fn select_positions(&self, positions: &[usize]) -> Self {
        let mut features = Vec::with_capacity(positions.len() * self.dim);
        let mut labels = Vec::with_capacity(positions.len());
        let mut ids = Vec::with_capacity(positions.len());
        for &p in positions {
            features.extend_from_slice(self.row(p));
            labels.push(self.labels[p]);
            ids.push(self.ids[p]);
        }
        let index = ids.iter().enumerate().map(|(pos, &id)| (id, pos)).collect();
        Self {
            features,
            dim: self.dim,
            labels,
            ids,
            n_classes: self.n_classes,
            split: self.split,
            index,
        }
    }

    /// Subset restricted to `ids`, preserving the original row order.
    pub fn subset(&self, ids: &IdSet) -> Result<Self> {
        if let Some(missing) = ids.iter().find(|id| !self.contains(**id)) {
            return Err(Error::param(format!("point id {missing} not in dataset")));
        }
        let positions: Vec<usize> = (0..self.len())
            .filter(|&p| ids.contains(&self.ids[p]))
            .collect();
        Ok(self.select_positions(&positions))
    }

    /// Subset with `removed` taken out, preserving row order.
    pub fn without(&self, removed: &IdSet) -> Result<Self> {
        if let Some(missing) = removed.iter().find(|id| !self.contains(**id)) {
            return Err(Error::param(format!("point id {missing} not in dataset")));
        }
        let positions: Vec<usize> = (0..self.len())
            .filter(|&p| !removed.contains(&self.ids[p]))
            .collect();
        Ok(self.select_positions(&positions))
    }

    /// Rows re-ordered by `perm` (`perm[k]` is the old position of new row k).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        self.select_positions(perm)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Writes a header row (`x0..x{d-1}` plus `label_column`) followed by
    /// one row per point. Values use shortest round-trip formatting.
    pub fn write_csv(&self, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
        let path = path.as_ref();
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
        header.push(label_column.to_string());
        wtr.write_record(&header)?;
        for pos in 0..self.len() {
            let mut rec: Vec<String> = self.row(pos).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[pos].to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Draws `n_per_class` points per class from unit-variance Gaussians.
///
/// Class `c` is centred at `class_separation * (1 + c / dim) * e_(c mod dim)`,
/// so every class gets a distinct lattice point on a positive axis. Points
/// are interleaved by class and ids run `0..n`.
pub fn generate_gaussian_blobs(
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::param("n_per_class must be at least 1"));
    }
    if n_classes < 2 {
        return Err(Error::param("n_classes must be at least 2"));
    }
    if dim == 0 {
        return Err(Error::param("dim must be at least 1"));
    }
    if !(class_separation > 0.0) || !class_separation.is_finite() {
        return Err(Error::param("class_separation must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * n_classes;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for c in 0..n_classes {
            let centre = blob_centre(c, dim, class_separation);
            for mu in centre {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(
        features,
        dim,
        labels,
        (0..n).collect(),
        n_classes,
        Split::Train,
    )
}

pub fn blob_centre(class: usize, dim: usize, class_separation: f64) -> Vec<f64> {
    let mut centre = vec![0.0; dim];
    centre[class % dim] = class_separation * (1 + class / dim) as f64;
    centre
}

/// Reads a CSV file with a header row. Every column other than
/// `label_column` must be numeric. Ids are assigned `0..n` in file order.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Ingestion {
            row: 0,
            column: label_column.to_string(),
            message: "label column not found in header".into(),
        })?;
    let dim = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(Error::Ingestion {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for (c, cell) in rec.iter().enumerate() {
            let column = headers.get(c).unwrap_or("?").to_string();
            if cell.is_empty() {
                return Err(Error::Ingestion {
                    row,
                    column,
                    message: "missing value".into(),
                });
            }
            if c == label_idx {
                let y: usize = cell.parse().map_err(|_| Error::Ingestion {
                    row,
                    column: column.clone(),
                    message: format!("label {cell:?} is not a non-negative integer"),
                })?;
                labels.push(y);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                    row,
                    column: column.clone(),
                    message: format!("{cell:?} is not numeric"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Ingestion {
                        row,
                        column,
                        message: "value is not finite".into(),
                    });
                }
                features.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Ingestion {
            row: 0,
            column: "*".into(),
            message: "file has no data rows".into(),
        });
    }
    let n_classes = (labels.iter().copied().max().unwrap_or(0) + 1).max(2);
    let n = labels.len();
    Dataset::new(
        features,
        dim,
        labels,
        (0..n).collect(),
        n_classes,
        Split::Train,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetStrategy {
    Random,
    ClassBalanced,
}

/// Disjoint forget (`S`) and retain (`R`) id sets covering a training set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForgetSpec {
    pub forget_ids: IdSet,
    pub retain_ids: IdSet,
}

impl ForgetSpec {
    /// Forget set `forget`, retain set = the rest of `train`.
    pub fn from_forget(train: &Dataset, forget: IdSet) -> Result<Self> {
        if forget.is_empty() {
            return Err(Error::param("forget set must be nonempty"));
        }
        if let Some(id) = forget.iter().find(|id| !train.contains(**id)) {
            return Err(Error::param(format!("forget id {id} not in training set")));
        }
        let retain_ids = train
            .ids()
            .iter()
            .copied()
            .filter(|id| !forget.contains(id))
            .collect();
        Ok(Self {
            forget_ids: forget,
            retain_ids,
        })
    }

    pub fn is_partition_of(&self, train_ids: &IdSet) -> bool {
        self.forget_ids.is_disjoint(&self.retain_ids)
            && self.forget_ids.len() + self.retain_ids.len() == train_ids.len()
            && self.forget_ids.union(&self.retain_ids).eq(train_ids.iter())
    }
}

/// Samples a forget set of `round(fraction * n_train)` points.
///
/// `ClassBalanced` draws `m / C` points per class and hands the remaining
/// `m % C` out one each to classes `0, 1, ...`.
pub fn make_forget_spec(
    train: &Dataset,
    fraction: f64,
    strategy: ForgetStrategy,
    seed: u64,
) -> Result<ForgetSpec> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param(format!("fraction {fraction} outside (0, 1)")));
    }
    let n = train.len();
    let m = (fraction * n as f64).round() as usize;
    if m == 0 {
        return Err(Error::param(format!(
            "fraction {fraction} of {n} points gives an empty forget set"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forget: IdSet = match strategy {
        ForgetStrategy::Random => index::sample(&mut rng, n, m)
            .into_iter()
            .map(|p| train.id(p))
            .collect(),
        ForgetStrategy::ClassBalanced => {
            let c = train.n_classes();
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
            for p in 0..n {
                by_class[train.label(p)].push(p);
            }
            let mut out = IdSet::new();
            for (class, members) in by_class.iter().enumerate() {
                let quota = m / c + usize::from(class < m % c);
                if quota > members.len() {
                    return Err(Error::param(format!(
                        "class {class} has {} points, {quota} requested",
                        members.len()
                    )));
                }
                for k in index::sample(&mut rng, members.len(), quota) {
                    out.insert(train.id(members[k]));
                }
            }
            out
        }
    };
    ForgetSpec::from_forget(train, forget)
}
