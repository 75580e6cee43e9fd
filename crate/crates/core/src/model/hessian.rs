use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use super::{dot, norm2, Arch, Curvature, ModelParams};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Above this parameter count the operator stays matrix-free.
pub const DENSE_MAX_PARAMS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianMode {
    Dense,
    MatrixFree,
}

/// Damping added when none is requested: zero for the convex model,
/// a small ridge for the MLP.
pub fn default_damping(arch: &Arch) -> f64 {
    match arch {
        Arch::LogisticRegression { .. } => 0.0,
        Arch::Mlp { .. } => 1e-3,
    }
}

/// `(1/n) * sum_i d^2 l(w; z_i) / dw dw^T + damping * I` at fixed weights.
#[derive(Debug, Clone)]
pub struct HessianOperator {
    params: ModelParams,
    data: Dataset,
    damping: f64,
    curvature: Curvature,
    mode: HessianMode,
    dense: Option<DMatrix<f64>>,
}

/// Builds the training Hessian, dense when the model has at most
/// [`DENSE_MAX_PARAMS`] weights.
pub fn training_hessian(
    params: &ModelParams,
    train: &Dataset,
    damping: f64,
) -> Result<HessianOperator> {
    let mode = if params.n_params() <= DENSE_MAX_PARAMS {
        HessianMode::Dense
    } else {
        HessianMode::MatrixFree
    };
    HessianOperator::build(params, train, damping, mode, Curvature::Exact)
}

impl HessianOperator {
    pub fn build(
        params: &ModelParams,
        train: &Dataset,
        damping: f64,
        mode: HessianMode,
        curvature: Curvature,
    ) -> Result<Self> {
        if !(damping >= 0.0) || !damping.is_finite() {
            return Err(Error::param("damping must be a finite non-negative number"));
        }
        params.check_dataset(train)?;
        if train.is_empty() {
            return Err(Error::param("Hessian of an empty training set"));
        }
        let mut op = Self {
            params: params.clone(),
            data: train.clone(),
            damping,
            curvature,
            mode,
            dense: None,
        };
        if mode == HessianMode::Dense {
            op.dense = Some(op.assemble());
        }
        Ok(op)
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn mode(&self) -> HessianMode {
        self.mode
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn with_damping(mut self, damping: f64) -> Result<Self> {
        if !(damping >= 0.0) || !damping.is_finite() {
            return Err(Error::param("damping must be a finite non-negative number"));
        }
        if let Some(m) = self.dense.as_mut() {
            let delta = damping - self.damping;
            for i in 0..m.nrows() {
                m[(i, i)] += delta;
            }
        }
        self.damping = damping;
        Ok(self)
    }

    fn assemble(&self) -> DMatrix<f64> {
        let k = self.n_params();
        let n = self.data.len() as f64;
        let diag = self.params.l2_lambda + self.damping;
        let mut h = DMatrix::<f64>::zeros(k, k);
        match self.params.arch {
            Arch::LogisticRegression { dim, classes } => {
                let stride = dim + 1;
                let mut xt = vec![1.0; stride];
                for pos in 0..self.data.len() {
                    xt[..dim].copy_from_slice(self.data.row(pos));
                    let p = self.params.forward(self.data.row(pos)).probs;
                    for a in 0..classes {
                        for b in 0..classes {
                            let coef = (if a == b { p[a] } else { 0.0 } - p[a] * p[b]) / n;
                            if coef == 0.0 {
                                continue;
                            }
                            for i in 0..stride {
                                let ci = coef * xt[i];
                                for j in 0..stride {
                                    h[(a * stride + i, b * stride + j)] += ci * xt[j];
                                }
                            }
                        }
                    }
                }
            }
            Arch::Mlp { .. } => {
                let mut e = vec![0.0; k];
                for col in 0..k {
                    e[col] = 1.0;
                    let hv = self.hvp_sum(&e);
                    for (row, v) in hv.into_iter().enumerate() {
                        h[(row, col)] = v;
                    }
                    e[col] = 0.0;
                }
                h = (&h + h.transpose()) * 0.5;
            }
        }
        for i in 0..k {
            h[(i, i)] += diag;
        }
        h
    }

    /// Mean cross-entropy HVP over the data, without penalty or damping.
    fn hvp_sum(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        let s = 1.0 / self.data.len() as f64;
        for pos in 0..self.data.len() {
            self.params.accumulate_ce_hvp(
                self.data.row(pos),
                self.data.label(pos),
                v,
                self.curvature,
                s,
                &mut out,
            );
        }
        out
    }

    fn check_vec(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.n_params() {
            return Err(Error::Shape {
                expected: self.n_params(),
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("vector has non-finite entries"));
        }
        Ok(())
    }

    /// Product computed from per-point HVPs, never touching the dense matrix.
    pub fn apply_matrix_free(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.check_vec(v)?;
        let diag = self.params.l2_lambda + self.damping;
        let mut out = self.hvp_sum(v);
        for (o, vi) in out.iter_mut().zip(v) {
            *o += diag * vi;
        }
        Ok(out)
    }

    /// `(H + damping * I) v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.dense {
            Some(m) => {
                self.check_vec(v)?;
                Ok((m * DVector::from_column_slice(v)).as_slice().to_vec())
            }
            None => self.apply_matrix_free(v),
        }
    }

    /// The dense matrix, assembling it if the operator is matrix-free.
    pub fn dense_matrix(&self) -> DMatrix<f64> {
        match &self.dense {
            Some(m) => m.clone(),
            None => self.assemble(),
        }
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let eig = SymmetricEigen::new(self.dense_matrix());
        let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues().first().copied().unwrap_or(f64::NAN)
    }

    /// Prepares repeated solves: factorises once in dense mode.
    pub fn solver(&self, opts: SolveOptions) -> Result<HessianSolver<'_>> {
        let chol = match &self.dense {
            Some(m) => Some(Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite)?),
            None => None,
        };
        Ok(HessianSolver {
            op: self,
            chol,
            opts,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    /// Relative residual bound `||A v - b|| <= tol * ||b||`.
    pub tol: f64,
    /// Conjugate-gradient iteration cap; `None` means `10 * K`.
    pub max_iter: Option<usize>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: None,
        }
    }
}

pub struct HessianSolver<'a> {
    op: &'a HessianOperator,
    chol: Option<Cholesky<f64, Dyn>>,
    opts: SolveOptions,
}

impl HessianSolver<'_> {
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        self.op.check_vec(rhs)?;
        let b_norm = norm2(rhs);
        if b_norm == 0.0 {
            return Ok(vec![0.0; rhs.len()]);
        }
        match &self.chol {
            Some(chol) => {
                let x = chol.solve(&DVector::from_column_slice(rhs));
                let x = x.as_slice().to_vec();
                let ax = self.op.apply(&x)?;
                let res = ax
                    .iter()
                    .zip(rhs)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if !(res <= self.opts.tol * b_norm) {
                    return Err(Error::Solver {
                        iterations: 0,
                        residual: res / b_norm,
                    });
                }
                Ok(x)
            }
            None => {
                let max_iter = self.opts.max_iter.unwrap_or(10 * rhs.len());
                conjugate_gradient(
                    |v| self.op.apply_matrix_free(v),
                    rhs,
                    self.opts.tol,
                    max_iter,
                )
            }
        }
    }
}

/// Solves `(H + damping * I) v = rhs`.
pub fn hessian_solve(op: &HessianOperator, rhs: &[f64], opts: SolveOptions) -> Result<Vec<f64>> {
    op.solver(opts)?.solve(rhs)
}

/// Conjugate gradients for a symmetric positive-definite operator.
pub(crate) fn conjugate_gradient<F>(
    apply: F,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = norm2(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    for iter in 0..max_iter {
        if rs.sqrt() <= tol * b_norm {
            return Ok(x);
        }
        let ap = apply(&p)?;
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Solver {
                iterations: iter,
                residual: rs.sqrt() / b_norm,
            });
        }
        let alpha = rs / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new = dot(&r, &r);
        let beta = rs_new / rs;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    // recompute the true residual before giving up
    let ax = apply(&x)?;
    let res = ax
        .iter()
        .zip(b)
        .map(|(a, bi)| (a - bi) * (a - bi))
        .sum::<f64>()
        .sqrt();
    if res <= tol * b_norm {
        Ok(x)
    } else {
        Err(Error::Solver {
            iterations: max_iter,
            residual: res / b_norm,
        })
    }
}
