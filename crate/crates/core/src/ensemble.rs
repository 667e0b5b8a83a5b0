//! Ensemble weights on the probability simplex.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CvekError, Result};

/// How base-kernel predictors are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleStrategy {
    /// Uniform weights `1/D`.
    Avg,
    /// Softmax of negative cross-validated error.
    Exp,
    /// Simplex-constrained least squares on cross-validated residuals.
    #[serde(alias = "erm")]
    Stack,
}

impl EnsembleStrategy {
    pub const ALL: [EnsembleStrategy; 3] = [EnsembleStrategy::Avg, EnsembleStrategy::Exp, EnsembleStrategy::Stack];

    pub fn name(self) -> &'static str {
        match self {
            EnsembleStrategy::Avg => "avg",
            EnsembleStrategy::Exp => "exp",
            EnsembleStrategy::Stack => "stack",
        }
    }
}

impl fmt::Display for EnsembleStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnsembleStrategy {
    type Err = CvekError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "avg" => Ok(EnsembleStrategy::Avg),
            "exp" => Ok(EnsembleStrategy::Exp),
            "stack" | "erm" => Ok(EnsembleStrategy::Stack),
            _ => Err(CvekError::unknown(
                "ensemble strategy",
                s,
                &["avg", "exp", "stack", "erm"],
            )),
        }
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub const SUM_TOLERANCE: f64 = 1e-10;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CvekError::InvalidArgument("weight vector is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CvekError::InvalidArgument(format!(
                "weights must be finite and nonnegative: {values:?}"
            )));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(CvekError::InvalidArgument(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn weights_avg(d: usize) -> Result<WeightVector> {
    if d == 0 {
        return Err(CvekError::InvalidArgument("ensemble of zero kernels".into()));
    }
    Ok(WeightVector(vec![1.0 / d as f64; d]))
}

/// `u_d ∝ exp(-|ε_d|² / β)`.
pub fn weights_exp(cv_residuals: &[DVector<f64>], beta: f64) -> Result<WeightVector> {
    if cv_residuals.is_empty() {
        return Err(CvekError::InvalidArgument("ensemble of zero kernels".into()));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(CvekError::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let errors: Vec<f64> = cv_residuals.iter().map(|e| e.norm_squared()).collect();
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(CvekError::NonFinite("cross-validated residuals"));
    }
    let best = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = errors.iter().map(|e| (-(e - best) / beta).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok(WeightVector(raw.into_iter().map(|w| w / total).collect()))
}

const STACK_MAX_ITER: usize = 10_000;
const STACK_TOL: f64 = 1e-12;

/// `argmin_{u ∈ Δ} |E u|²` with `E = [ε_1 ... ε_D]`.
///
/// Projected gradient with step `1/L`, `L = λ_max(E'E)`, started from the
/// uniform vector. When the optimum is not unique the iterate stays on the
/// face nearest the uniform start, so identical residuals keep uniform weights.
pub fn weights_stack(cv_residuals: &[DVector<f64>]) -> Result<WeightVector> {
    let d = cv_residuals.len();
    if d == 0 {
        return Err(CvekError::InvalidArgument("ensemble of zero kernels".into()));
    }
    let n = cv_residuals[0].len();
    if let Some(bad) = cv_residuals.iter().find(|e| e.len() != n) {
        return Err(CvekError::DimensionMismatch {
            context: "cross-validated residual lengths",
            expected: n,
            found: bad.len(),
        });
    }
    if cv_residuals.iter().any(|e| e.iter().any(|v| !v.is_finite())) {
        return Err(CvekError::NonFinite("cross-validated residuals"));
    }
    let e = DMatrix::from_fn(n, d, |i, j| cv_residuals[j][i]);
    let gram = e.tr_mul(&e);
    Ok(WeightVector(minimize_on_simplex(&gram)))
}

/// Minimizes `u' G u` over the simplex for symmetric PSD `G`.
pub(crate) fn minimize_on_simplex(gram: &DMatrix<f64>) -> Vec<f64> {
    let d = gram.nrows();
    let mut u = DVector::from_element(d, 1.0 / d as f64);
    if d == 1 {
        return u.as_slice().to_vec();
    }
    let lipschitz = SymmetricEigen::new(gram.clone()).eigenvalues.max();
    if !(lipschitz > 0.0) {
        return u.as_slice().to_vec();
    }
    let objective = |u: &DVector<f64>| u.dot(&(gram * u));
    let mut current = objective(&u);
    for _ in 0..STACK_MAX_ITER {
        // ∇(u'Gu) = 2Gu; the step 1/L on the half-objective is the same move.
        let step = (gram * &u) / lipschitz;
        let next = project_to_simplex(&(&u - step));
        let value = objective(&next);
        let moved = (&next - &u).amax();
        u = next;
        let improvement = current - value;
        current = value;
        // the objective flattens quadratically, so also wait for the iterate to settle
        if improvement.abs() <= STACK_TOL * (1.0 + current.abs()) && moved <= STACK_TOL {
            break;
        }
    }
    u.as_slice().to_vec()
}

/// Euclidean projection onto `{u : u >= 0, Σu = 1}` by the sort-and-threshold rule.
pub fn project_to_simplex(v: &DVector<f64>) -> DVector<f64> {
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, value) in sorted.iter().enumerate() {
        cumulative += value;
        let candidate = (cumulative - 1.0) / (k + 1) as f64;
        if value - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut out = v.map(|x| (x - theta).max(0.0));
    let total = out.sum();
    out /= total;
    out
}

/// `|Σ u_d ε_d|²`
pub fn stacking_objective(cv_residuals: &[DVector<f64>], u: &[f64]) -> f64 {
    let n = cv_residuals.first().map_or(0, |e| e.len());
    let combined = cv_residuals
        .iter()
        .zip(u)
        .fold(DVector::zeros(n), |acc, (e, w)| acc + e * *w);
    combined.norm_squared()
}

pub fn weights(strategy: EnsembleStrategy, cv_residuals: &[DVector<f64>], beta: f64) -> Result<WeightVector> {
    match strategy {
        EnsembleStrategy::Avg => weights_avg(cv_residuals.len()),
        EnsembleStrategy::Exp => weights_exp(cv_residuals, beta),
        EnsembleStrategy::Stack => weights_stack(cv_residuals),
    }
}
