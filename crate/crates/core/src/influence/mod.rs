//! Per-point influence scores.
//!
//! Four scorers share one output type, [`InfluenceScores`]:
//!
//! * [`oracle`]: exact leave-one-out retraining (accuracy- or loss-valued),
//! * [`hessian`]: the closed-form first-order approximation `J_j' H^-1 J`,
//! * [`less`]: cosine similarity in a randomly projected gradient datastore,
//! * [`gradients`]: max per-point gradient norm over late training checkpoints.
//!
//! All scores follow one convention: larger means more influential.

pub mod gradients;
pub mod hessian;
pub mod less;
pub mod oracle;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{create_csv, finish_csv, open_csv, read_json, write_json, ArtifactHeader};
use crate::dataset::{Dataset, PointId};
use crate::error::{Error, Result};

pub use gradients::{
    low_gradient_count_curve, lowest_gradients_scores, LowGradientCount, DEFAULT_FROM_CHECKPOINT,
};
pub use hessian::{hessian_influence, HessianConfig};
pub use less::{less_influence, select_snapshots, LessConfig, Projection, ProjectionKind};
pub use oracle::{exact_loo_influence, memorization_score, LooOracle, OracleValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ExactLoo,
    Hessian,
    Less,
    LowestGradients,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::ExactLoo => "exact_loo",
            Method::Hessian => "hessian",
            Method::Less => "less",
            Method::LowestGradients => "lowest_gradients",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact_loo" => Some(Method::ExactLoo),
            "hessian" => Some(Method::Hessian),
            "less" => Some(Method::Less),
            "lowest_gradients" => Some(Method::LowestGradients),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "test")]
    Test,
    #[serde(rename = "self")]
    SelfInfluence,
}

impl Mode {
    pub fn tag(self) -> &'static str {
        match self {
            Mode::Test => "test",
            Mode::SelfInfluence => "self",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "test" => Some(Mode::Test),
            "self" => Some(Mode::SelfInfluence),
            _ => None,
        }
    }
}

/// Everything needed to reproduce a set of scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMetadata {
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_subset_ids: Option<Vec<PointId>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub solver_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub damping: Option<f64>,
    /// Damping originally requested when it had to be raised.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub requested_damping: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min_eigenvalue: Option<f64>,
    /// Norm of the mean training gradient at the scored weights.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub projection_dim: Option<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub checkpoint_epochs: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub zero_norm_contributions: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub from_checkpoint: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oracle_value: Option<OracleValue>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScores {
    pub method: Method,
    pub mode: Mode,
    pub scores: BTreeMap<PointId, f64>,
    pub metadata: ScoreMetadata,
}

impl InfluenceScores {
    pub fn new(
        method: Method,
        mode: Mode,
        scores: BTreeMap<PointId, f64>,
        metadata: ScoreMetadata,
    ) -> Result<Self> {
        if let Some((id, v)) = scores.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::param(format!(
                "score for point {id} is not finite ({v})"
            )));
        }
        Ok(Self {
            method,
            mode,
            scores,
            metadata,
        })
    }

    pub(crate) fn from_positions(
        method: Method,
        mode: Mode,
        data: &Dataset,
        values: Vec<f64>,
        metadata: ScoreMetadata,
    ) -> Result<Self> {
        let scores = data.ids().iter().copied().zip(values).collect();
        Self::new(method, mode, scores, metadata)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `method_mode`, e.g. `hessian_self`.
    pub fn label(&self) -> String {
        format!("{}_{}", self.method.tag(), self.mode.tag())
    }

    /// Value used for ranking: `|score|` in test mode, the raw score in
    /// self mode.
    pub fn effective(&self, score: f64) -> f64 {
        match self.mode {
            Mode::Test => score.abs(),
            Mode::SelfInfluence => score,
        }
    }

    pub fn get(&self, id: PointId) -> Option<f64> {
        self.scores.get(&id).copied()
    }

    pub fn covers(&self, data: &Dataset) -> bool {
        self.scores.len() == data.len() && data.ids().iter().all(|id| self.scores.contains_key(id))
    }

    /// `point_id,score` rows in ascending id order.
    pub fn write_csv(&self, path: &Path, header: Option<&ArtifactHeader>) -> Result<()> {
        let mut wtr = create_csv(path, header)?;
        wtr.write_record(["point_id", "score"])?;
        for (id, s) in &self.scores {
            wtr.write_record([id.to_string(), s.to_string()])?;
        }
        finish_csv(wtr, path)
    }

    pub fn write_metadata(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            method: Method,
            mode: Mode,
            n_points: usize,
            #[serde(flatten)]
            metadata: &'a ScoreMetadata,
        }
        write_json(
            path,
            &Sidecar {
                method: self.method,
                mode: self.mode,
                n_points: self.scores.len(),
                metadata: &self.metadata,
            },
        )
    }

    /// Reads a scores CSV and its JSON sidecar.
    pub fn read(csv_path: &Path, meta_path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Sidecar {
            method: Method,
            mode: Mode,
            #[serde(flatten)]
            metadata: ScoreMetadata,
        }
        let side: Sidecar = read_json(meta_path)?;
        let mut rdr = open_csv(csv_path)?;
        let mut scores = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let bad = || Error::param(format!("malformed score row in {}", csv_path.display()));
            let id: PointId = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let v: f64 = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            scores.insert(id, v);
        }
        Self::new(side.method, side.mode, scores, side.metadata)
    }
}

/// Uniform sample of `size` points (all points when `size >= len`).
pub fn sample_subset(data: &Dataset, size: usize, seed: u64) -> Dataset {
    use rand::seq::index;
    use rand::SeedableRng;
    if size >= data.len() {
        return data.clone();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, data.len(), size).into_vec();
    picked.sort_unstable();
    data.select_positions(&picked)
}

/// Default number of test points averaged in test mode.
pub const DEFAULT_TEST_SUBSET: usize = 100;
