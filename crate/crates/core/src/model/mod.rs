//! Softmax classifiers with exact per-sample losses, gradients and
//! Hessian-vector products.
//!
//! Every per-sample loss carries the full `(l2_lambda / 2) * ||w||^2`
//! penalty, so averaging over any subset of points yields the mean
//! cross-entropy of that subset plus one copy of the penalty. Retraining on
//! a subset therefore minimises exactly the reweighted objective with the
//! removed points' weights set to zero.

mod hessian;

pub use hessian::{
    default_damping, hessian_solve, training_hessian, HessianMode, HessianOperator, HessianSolver,
    SolveOptions, DENSE_MAX_PARAMS,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, PointId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    LogisticRegression {
        dim: usize,
        classes: usize,
    },
    /// One `tanh` hidden layer.
    Mlp {
        dim: usize,
        hidden: usize,
        classes: usize,
    },
}

impl Arch {
    pub fn n_params(&self) -> usize {
        match *self {
            Arch::LogisticRegression { dim, classes } => (dim + 1) * classes,
            Arch::Mlp {
                dim,
                hidden,
                classes,
            } => (dim + 1) * hidden + (hidden + 1) * classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            Arch::LogisticRegression { dim, .. } | Arch::Mlp { dim, .. } => dim,
        }
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            Arch::LogisticRegression { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    pub fn is_convex(&self) -> bool {
        matches!(self, Arch::LogisticRegression { .. })
    }

    /// Range of weights belonging to the output layer.
    pub fn last_layer(&self) -> std::ops::Range<usize> {
        match *self {
            Arch::LogisticRegression { .. } => 0..self.n_params(),
            Arch::Mlp { dim, hidden, .. } => (dim + 1) * hidden..self.n_params(),
        }
    }
}

/// Second-order model used by Hessian-vector products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    #[default]
    Exact,
    /// Drops the terms involving second derivatives of the network
    /// outputs. Identical to `Exact` for logistic regression.
    GaussNewton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Arch,
    pub l2_lambda: f64,
    pub weights: Vec<f64>,
}

/// Gradient of one training point's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub point_id: PointId,
    pub grad: Vec<f64>,
}

struct Forward {
    hidden: Vec<f64>,
    probs: Vec<f64>,
    logits: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: Arch, l2_lambda: f64, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != arch.n_params() {
            return Err(Error::Shape {
                expected: arch.n_params(),
                got: weights.len(),
            });
        }
        if !(l2_lambda >= 0.0) {
            return Err(Error::param("l2_lambda must be non-negative"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::param("weights must be finite"));
        }
        Ok(Self {
            arch,
            l2_lambda,
            weights,
        })
    }

    pub fn zeros(arch: Arch, l2_lambda: f64) -> Self {
        Self {
            arch,
            l2_lambda,
            weights: vec![0.0; arch.n_params()],
        }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        let d = self.arch.input_dim();
        if x.len() != d {
            return Err(Error::Shape {
                expected: d,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.arch.n_classes() {
            return Err(Error::param(format!(
                "label {y} outside [0, {})",
                self.arch.n_classes()
            )));
        }
        Ok(())
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.arch.input_dim() {
            return Err(Error::Shape {
                expected: self.arch.input_dim(),
                got: data.dim(),
            });
        }
        if data.n_classes() > self.arch.n_classes() {
            return Err(Error::param(format!(
                "dataset has {} classes, model {}",
                data.n_classes(),
                self.arch.n_classes()
            )));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let w = &self.weights;
        match self.arch {
            Arch::LogisticRegression { dim, classes } => {
                let logits: Vec<f64> = (0..classes)
                    .map(|k| {
                        let row = &w[k * (dim + 1)..(k + 1) * (dim + 1)];
                        dot(&row[..dim], x) + row[dim]
                    })
                    .collect();
                let probs = softmax(&logits);
                Forward {
                    hidden: Vec::new(),
                    probs,
                    logits,
                }
            }
            Arch::Mlp {
                dim,
                hidden,
                classes,
            } => {
                let h: Vec<f64> = (0..hidden)
                    .map(|j| {
                        let row = &w[j * (dim + 1)..(j + 1) * (dim + 1)];
                        (dot(&row[..dim], x) + row[dim]).tanh()
                    })
                    .collect();
                let off = hidden * (dim + 1);
                let logits: Vec<f64> = (0..classes)
                    .map(|k| {
                        let row = &w[off + k * (hidden + 1)..off + (k + 1) * (hidden + 1)];
                        dot(&row[..hidden], &h) + row[hidden]
                    })
                    .collect();
                let probs = softmax(&logits);
                Forward {
                    hidden: h,
                    probs,
                    logits,
                }
            }
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.forward(x).logits)
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.forward(x).probs)
    }

    /// Arg-max class; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let z = self.logits(x)?;
        let mut best = 0;
        for k in 1..z.len() {
            if z[k] > z[best] {
                best = k;
            }
        }
        Ok(best)
    }

    /// Penultimate representation: hidden activations for an MLP, the raw
    /// input for logistic regression.
    pub fn representation(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(match self.arch {
            Arch::LogisticRegression { .. } => x.to_vec(),
            Arch::Mlp { .. } => self.forward(x).hidden,
        })
    }

    pub fn penalty(&self) -> f64 {
        0.5 * self.l2_lambda * dot(&self.weights, &self.weights)
    }

    /// Softmax cross-entropy without the weight penalty.
    pub fn cross_entropy(&self, x: &[f64], y: usize) -> Result<f64> {
        self.check_dim(x)?;
        self.check_label(y)?;
        let z = self.forward(x).logits;
        Ok(log_sum_exp(&z) - z[y])
    }

    /// Cross-entropy plus the full `(l2_lambda / 2) * ||w||^2` penalty.
    pub fn per_sample_loss(&self, x: &[f64], y: usize) -> Result<f64> {
        Ok(self.cross_entropy(x, y)? + self.penalty())
    }

    pub fn per_sample_grad(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        self.check_label(y)?;
        let mut g: Vec<f64> = self.weights.iter().map(|w| self.l2_lambda * w).collect();
        self.accumulate_ce_grad(x, y, 1.0, &mut g);
        Ok(g)
    }

    pub fn point_gradient(&self, data: &Dataset, pos: usize) -> Result<LossGradient> {
        Ok(LossGradient {
            point_id: data.id(pos),
            grad: self.per_sample_grad(data.row(pos), data.label(pos))?,
        })
    }

    /// Adds `scale * d(cross_entropy)/dw` into `out`.
    pub(crate) fn accumulate_ce_grad(&self, x: &[f64], y: usize, scale: f64, out: &mut [f64]) {
        let f = self.forward(x);
        let mut dz = f.probs;
        dz[y] -= 1.0;
        let w = &self.weights;
        match self.arch {
            Arch::LogisticRegression { dim, .. } => {
                for (k, &d) in dz.iter().enumerate() {
                    let s = scale * d;
                    let row = &mut out[k * (dim + 1)..(k + 1) * (dim + 1)];
                    for (r, &xi) in row[..dim].iter_mut().zip(x) {
                        *r += s * xi;
                    }
                    row[dim] += s;
                }
            }
            Arch::Mlp { dim, hidden, .. } => {
                let off = hidden * (dim + 1);
                let h = &f.hidden;
                let mut dh = vec![0.0; hidden];
                for (k, &d) in dz.iter().enumerate() {
                    let base = off + k * (hidden + 1);
                    let s = scale * d;
                    for j in 0..hidden {
                        out[base + j] += s * h[j];
                        dh[j] += w[base + j] * d;
                    }
                    out[base + hidden] += s;
                }
                for j in 0..hidden {
                    let da = scale * dh[j] * (1.0 - h[j] * h[j]);
                    let row = &mut out[j * (dim + 1)..(j + 1) * (dim + 1)];
                    for (r, &xi) in row[..dim].iter_mut().zip(x) {
                        *r += da * xi;
                    }
                    row[dim] += da;
                }
            }
        }
    }

    /// Adds `scale * (d^2 cross_entropy / dw dw^T) v` into `out`, computed
    /// by forward-mode differentiation of the backward pass.
    pub(crate) fn accumulate_ce_hvp(
        &self,
        x: &[f64],
        y: usize,
        v: &[f64],
        curvature: Curvature,
        scale: f64,
        out: &mut [f64],
    ) {
        let f = self.forward(x);
        let p = &f.probs;
        let w = &self.weights;
        let softmax_jvp = |rz: &[f64]| -> Vec<f64> {
            let pr = dot(p, rz);
            p.iter().zip(rz).map(|(pk, rk)| pk * (rk - pr)).collect()
        };
        match self.arch {
            Arch::LogisticRegression { dim, classes } => {
                let rz: Vec<f64> = (0..classes)
                    .map(|k| {
                        let row = &v[k * (dim + 1)..(k + 1) * (dim + 1)];
                        dot(&row[..dim], x) + row[dim]
                    })
                    .collect();
                let rdz = softmax_jvp(&rz);
                for (k, &r) in rdz.iter().enumerate() {
                    let s = scale * r;
                    let row = &mut out[k * (dim + 1)..(k + 1) * (dim + 1)];
                    for (o, &xi) in row[..dim].iter_mut().zip(x) {
                        *o += s * xi;
                    }
                    row[dim] += s;
                }
            }
            Arch::Mlp {
                dim,
                hidden,
                classes,
            } => {
                let exact = curvature == Curvature::Exact;
                let off = hidden * (dim + 1);
                let h = &f.hidden;
                let mut dz = p.clone();
                dz[y] -= 1.0;
                let rh: Vec<f64> = (0..hidden)
                    .map(|j| {
                        let row = &v[j * (dim + 1)..(j + 1) * (dim + 1)];
                        (1.0 - h[j] * h[j]) * (dot(&row[..dim], x) + row[dim])
                    })
                    .collect();
                let rz: Vec<f64> = (0..classes)
                    .map(|k| {
                        let base = off + k * (hidden + 1);
                        let vrow = &v[base..base + hidden + 1];
                        let wrow = &w[base..base + hidden];
                        dot(&vrow[..hidden], h) + vrow[hidden] + dot(wrow, &rh)
                    })
                    .collect();
                let rdz = softmax_jvp(&rz);
                let mut dh = vec![0.0; hidden];
                let mut rdh = vec![0.0; hidden];
                for k in 0..classes {
                    let base = off + k * (hidden + 1);
                    for j in 0..hidden {
                        let mut g = rdz[k] * h[j];
                        if exact {
                            g += dz[k] * rh[j];
                            rdh[j] += v[base + j] * dz[k];
                        }
                        out[base + j] += scale * g;
                        dh[j] += w[base + j] * dz[k];
                        rdh[j] += w[base + j] * rdz[k];
                    }
                    out[base + hidden] += scale * rdz[k];
                }
                for j in 0..hidden {
                    let deriv = 1.0 - h[j] * h[j];
                    let mut rda = rdh[j] * deriv;
                    if exact {
                        rda -= 2.0 * dh[j] * h[j] * rh[j];
                    }
                    let s = scale * rda;
                    let row = &mut out[j * (dim + 1)..(j + 1) * (dim + 1)];
                    for (o, &xi) in row[..dim].iter_mut().zip(x) {
                        *o += s * xi;
                    }
                    row[dim] += s;
                }
            }
        }
    }

    /// Per-point Hessian-vector product `H_i v`, penalty included.
    pub fn per_sample_hvp(
        &self,
        x: &[f64],
        y: usize,
        v: &[f64],
        curvature: Curvature,
    ) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        self.check_label(y)?;
        if v.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                got: v.len(),
            });
        }
        let mut out: Vec<f64> = v.iter().map(|vi| self.l2_lambda * vi).collect();
        self.accumulate_ce_hvp(x, y, v, curvature, 1.0, &mut out);
        Ok(out)
    }

    /// Mean per-sample loss over `data`.
    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        Ok(self.mean_cross_entropy(data)? + self.penalty())
    }

    pub fn mean_cross_entropy(&self, data: &Dataset) -> Result<f64> {
        self.check_dataset(data)?;
        if data.is_empty() {
            return Err(Error::param("cannot average over an empty dataset"));
        }
        let mut total = 0.0;
        for pos in 0..data.len() {
            let z = self.forward(data.row(pos)).logits;
            total += log_sum_exp(&z) - z[data.label(pos)];
        }
        Ok(total / data.len() as f64)
    }

    /// Mean per-sample gradient over `data`, penalty included.
    pub fn mean_grad(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.check_dataset(data)?;
        if data.is_empty() {
            return Err(Error::param("cannot average over an empty dataset"));
        }
        let mut g: Vec<f64> = self.weights.iter().map(|w| self.l2_lambda * w).collect();
        let s = 1.0 / data.len() as f64;
        for pos in 0..data.len() {
            self.accumulate_ce_grad(data.row(pos), data.label(pos), s, &mut g);
        }
        Ok(g)
    }

    pub fn accuracy_on(&self, data: &Dataset) -> Result<f64> {
        self.check_dataset(data)?;
        if data.is_empty() {
            return Err(Error::param("accuracy of an empty set is undefined"));
        }
        let mut correct = 0usize;
        for pos in 0..data.len() {
            if self.predict(data.row(pos))? == data.label(pos) {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// SHA-256 over the architecture, penalty and weight bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).unwrap_or_default());
        h.update(self.l2_lambda.to_bits().to_le_bytes());
        for w in &self.weights {
            h.update(w.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the checkpoint as JSON; weights round-trip exactly.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::artifact::write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Prerequisite(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: ModelParams = serde_json::from_str(&text)?;
        ModelParams::new(p.arch, p.l2_lambda, p.weights)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
