//! Experiment configuration: a TOML document plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::artifact::ArtifactHeader;
use crate::dataset::{
    generate_gaussian_blobs, load_csv, make_forget_spec, Dataset, ForgetSpec, ForgetStrategy, Split,
};
use crate::error::{Error, Result};
use crate::eval::MiaFeatures;
use crate::influence::{Mode, OracleValue, ProjectionKind};
use crate::model::{Arch, Curvature};
use crate::trainer::{NormKind, TrainConfig};
use crate::unlearn::UnlearnKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Blobs {
        n_per_class: usize,
        n_classes: usize,
        dim: usize,
        separation: f64,
        test_per_class: usize,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub forget_fraction: f64,
    pub forget_strategy: ForgetStrategy,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs {
                n_per_class: 150,
                n_classes: 3,
                dim: 5,
                separation: 2.5,
                test_per_class: 60,
            },
            forget_fraction: 0.1,
            forget_strategy: ForgetStrategy::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    LogisticRegression,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    /// Hidden width for `mlp`.
    pub hidden: usize,
    pub l2_lambda: f64,
    pub curvature: Curvature,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::LogisticRegression,
            hidden: 16,
            l2_lambda: 0.01,
            curvature: Curvature::Exact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceSettings {
    /// Methods run by `influence --method all` and plotted by `curve`.
    pub methods: Vec<String>,
    pub mode: Mode,
    pub test_subset_size: usize,
    pub oracle_repeats: usize,
    pub oracle_value: OracleValue,
    pub damping: Option<f64>,
    pub solver_tol: f64,
    pub projection_dim: usize,
    pub projection: ProjectionKind,
    pub adam_normalize: bool,
    pub less_checkpoints: usize,
    pub from_checkpoint: usize,
    pub norm: NormKind,
    /// Bottom fraction compared by the agreement matrix.
    pub agreement_fraction: f64,
}

impl Default for InfluenceSettings {
    fn default() -> Self {
        Self {
            methods: vec!["hessian".into(), "less".into(), "lowest_gradients".into()],
            mode: Mode::SelfInfluence,
            test_subset_size: crate::influence::DEFAULT_TEST_SUBSET,
            oracle_repeats: 5,
            oracle_value: OracleValue::Accuracy,
            damping: None,
            solver_tol: 1e-8,
            projection_dim: 512,
            projection: ProjectionKind::Gaussian,
            adam_normalize: true,
            less_checkpoints: 4,
            from_checkpoint: crate::influence::DEFAULT_FROM_CHECKPOINT,
            norm: NormKind::L2,
            agreement_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CosineSettings {
    pub c: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySpace {
    /// Hidden layer for `mlp`, raw features otherwise.
    Auto,
    Features,
    Representation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    /// Scores used for selection, e.g. `hessian`.
    pub method: String,
    pub mode: Mode,
    pub x_grid: Vec<f64>,
    pub random_baseline: bool,
    pub cosine: Option<CosineSettings>,
    pub similarity: SimilaritySpace,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            method: "hessian".into(),
            mode: Mode::SelfInfluence,
            x_grid: vec![0.0, 0.2, 0.4, 0.6],
            random_baseline: true,
            cosine: Some(CosineSettings { c: 0.9, k: 3 }),
            similarity: SimilaritySpace::Auto,
        }
    }
}

/// How the x-grid maps onto the forget and retain sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    /// `x` is the bottom fraction of the whole training set.
    Combined,
    /// `x` is the bottom fraction of the forget set; the retain set loses
    /// its own bottom `x_retain`.
    Independent { x_retain: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnSettings {
    pub algorithms: Vec<UnlearnKind>,
    pub n_seeds: usize,
    pub schedule: Schedule,
}

impl Default for UnlearnSettings {
    fn default() -> Self {
        Self {
            algorithms: vec![
                UnlearnKind::RetrainFull,
                UnlearnKind::FinetuneRetain {
                    epochs: 5,
                    learning_rate: 0.05,
                },
            ],
            n_seeds: 5,
            schedule: Schedule::Combined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mia_folds: usize,
    pub mia_features: MiaFeatures,
    pub removal_sizes: Vec<usize>,
    pub low_grad_percentile: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mia_folds: 10,
            mia_features: MiaFeatures::PerSampleLoss,
            removal_sizes: vec![0, 10, 20, 40, 80],
            low_grad_percentile: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// `train.seed` is replaced by a seed derived from `master_seed`.
    pub train: TrainConfig,
    pub influence: InfluenceSettings,
    pub filter: FilterSettings,
    pub unlearn: UnlearnSettings,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            out_dir: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            influence: InfluenceSettings::default(),
            filter: FilterSettings::default(),
            unlearn: UnlearnSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// First eight bytes of `sha256("{master}:{tag}")`, little endian.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let digest = Sha256::digest(format!("{master}:{tag}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key written above"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot separated) in `table`. Missing tables on the way are
/// copied from `defaults`, so `dataset.source.dim=3` keeps the default
/// source. Setting `kind` to a new value clears the sibling keys of the
/// old variant.
fn set_path(
    table: &mut toml::Table,
    defaults: &toml::Table,
    path: &str,
    value: toml::Value,
) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key {path:?}")));
    }
    let mut cur = table;
    let mut def = Some(defaults);
    for (i, key) in keys[..keys.len() - 1].iter().enumerate() {
        let sub_default = def
            .and_then(|d| d.get(*key))
            .and_then(toml::Value::as_table);
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(sub_default.cloned().unwrap_or_default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{} is not a table", keys[..=i].join("."))))?;
        def = sub_default;
    }
    let last = keys[keys.len() - 1];
    if last == "kind" && cur.get("kind") != Some(&value) {
        cur.clear();
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (defaults when `None`) and applies `key=value`
    /// overrides; values are parsed as TOML, falling back to a string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(Error::Prerequisite(p.to_path_buf()));
                }
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let defaults = match toml::Value::try_from(Self::default()) {
            Ok(toml::Value::Table(t)) => t,
            _ => toml::Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, &defaults, key.trim(), parse_value(value.trim()))?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.dataset.forget_fraction > 0.0 && self.dataset.forget_fraction < 1.0) {
            return bad("dataset.forget_fraction must lie in (0, 1)".into());
        }
        if self.model.arch == ArchKind::Mlp && self.model.hidden == 0 {
            return bad("model.hidden must be at least 1".into());
        }
        if !(self.model.l2_lambda >= 0.0) {
            return bad("model.l2_lambda must be non-negative".into());
        }
        self.train
            .validate()
            .map_err(|e| Error::Config(format!("train: {e}")))?;
        if let Some(x) = self
            .filter
            .x_grid
            .iter()
            .find(|x| !(0.0..=1.0).contains(*x))
        {
            return bad(format!("filter.x_grid value {x} outside [0, 1]"));
        }
        if let Some(c) = &self.filter.cosine {
            if c.k == 0 {
                return bad("filter.cosine.k must be at least 1".into());
            }
        }
        if !(0.0..=1.0).contains(&self.influence.agreement_fraction) {
            return bad("influence.agreement_fraction must lie in [0, 1]".into());
        }
        if self.unlearn.n_seeds == 0 {
            return bad("unlearn.n_seeds must be at least 1".into());
        }
        if self.influence.oracle_repeats == 0 {
            return bad("influence.oracle_repeats must be at least 1".into());
        }
        if self.influence.projection_dim == 0 {
            return bad("influence.projection_dim must be at least 1".into());
        }
        if !(self.eval.low_grad_percentile > 0.0 && self.eval.low_grad_percentile < 100.0) {
            return bad("eval.low_grad_percentile must lie in (0, 100)".into());
        }
        Ok(())
    }

    /// sha256 of the resolved configuration in canonical JSON, with
    /// `out_dir` blanked so the same experiment hashes alike wherever it
    /// is written.
    pub fn checksum(&self) -> String {
        let canonical = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn header(&self) -> ArtifactHeader {
        ArtifactHeader {
            master_seed: self.master_seed,
            config_checksum: self.checksum(),
        }
    }

    pub fn seed(&self, tag: &str) -> u64 {
        derive_seed(self.master_seed, tag)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed("train"),
            ..self.train.clone()
        }
    }

    /// Train and test splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset.source {
            DataSource::Blobs {
                n_per_class,
                n_classes,
                dim,
                separation,
                test_per_class,
            } => {
                let train = generate_gaussian_blobs(
                    *n_per_class,
                    *n_classes,
                    *dim,
                    *separation,
                    self.seed("data:train"),
                )?;
                let test = generate_gaussian_blobs(
                    *test_per_class,
                    *n_classes,
                    *dim,
                    *separation,
                    self.seed("data:test"),
                )?
                .with_split(Split::Test);
                Ok((train, test))
            }
            DataSource::Csv {
                train,
                test,
                label_column,
            } => {
                for p in [train, test] {
                    if !p.exists() {
                        return Err(Error::Prerequisite(p.clone()));
                    }
                }
                let tr = load_csv(train, label_column)?;
                let te = load_csv(test, label_column)?.with_split(Split::Test);
                if tr.dim() != te.dim() {
                    return Err(Error::Config(
                        "train and test csv files differ in feature count".into(),
                    ));
                }
                let classes = tr.n_classes().max(te.n_classes());
                Ok((with_classes(tr, classes)?, with_classes(te, classes)?))
            }
        }
    }

    pub fn arch(&self, train: &Dataset) -> Arch {
        match self.model.arch {
            ArchKind::LogisticRegression => Arch::LogisticRegression {
                dim: train.dim(),
                classes: train.n_classes(),
            },
            ArchKind::Mlp => Arch::Mlp {
                dim: train.dim(),
                hidden: self.model.hidden,
                classes: train.n_classes(),
            },
        }
    }

    pub fn forget_spec(&self, train: &Dataset) -> Result<ForgetSpec> {
        make_forget_spec(
            train,
            self.dataset.forget_fraction,
            self.dataset.forget_strategy,
            self.seed("forget"),
        )
    }
}

fn with_classes(d: Dataset, classes: usize) -> Result<Dataset> {
    if d.n_classes() == classes {
        return Ok(d);
    }
    let split = d.split();
    Dataset::new(
        d.features().to_vec(),
        d.dim(),
        d.labels().to_vec(),
        d.ids().to_vec(),
        classes,
        split,
    )
}
