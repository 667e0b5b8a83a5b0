//! Base-kernel fits and the cross-validated kernel ensemble (CVEK) null model.
//!
//! Pipeline:
//! 1. each trace-normalized base kernel gets its own λ̂_d and leave-one-out residuals;
//! 2. weights û are chosen from those residuals;
//! 3. the ensemble smoother `Â = Σ û_d A_d` is inverted into an ensemble kernel
//!    `K̂ = λ_K U diag(δ / (1 - δ)) U'`, which satisfies `K̂ (K̂ + λ_K I)^{-1} = Â`;
//! 4. λ is re-tuned on `K̂` and a ridge fit with a free intercept gives the null mean,
//!    the noise variance σ̂² and `τ̂ = σ̂² / λ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{self, EnsembleStrategy, WeightVector};
use crate::error::{CvekError, Result};
use crate::kernel::{normalize_trace, GramMatrix, GramSource, KernelSpec};
use crate::tuning::{center, CriterionEvaluator, KernelSpectrum, LambdaGrid, TuningCriterion};

/// Upper clip for ensemble-smoother eigenvalues before `δ / (1 - δ)`.
pub const EIGEN_CLIP: f64 = 1.0 - 1e-8;

#[derive(Clone, Debug)]
pub struct BaseFit {
    pub spec: Option<KernelSpec>,
    pub lambda_hat: f64,
    pub objective: f64,
    pub smoother: DMatrix<f64>,
    pub cv_residuals: DVector<f64>,
}

/// Tuning and ensembling options for a CVEK fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvekOptions {
    pub criterion: TuningCriterion,
    pub strategy: EnsembleStrategy,
    /// Temperature of the `exp` strategy.
    pub beta: f64,
    pub grid: LambdaGrid,
}

impl Default for CvekOptions {
    fn default() -> Self {
        CvekOptions {
            criterion: TuningCriterion::Loocv,
            strategy: EnsembleStrategy::Stack,
            beta: 1.0,
            grid: LambdaGrid::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EnsembleFit {
    pub base_fits: Vec<BaseFit>,
    pub u_hat: WeightVector,
    pub a_hat: DMatrix<f64>,
    pub k_ens: GramMatrix,
    pub lambda_k: f64,
    pub lambda_ens: f64,
    pub intercept: f64,
    pub alpha: DVector<f64>,
    /// `intercept + K̂ α`
    pub fitted: DVector<f64>,
    pub sigma2_hat: f64,
    pub tau_hat: f64,
}

impl EnsembleFit {
    pub fn base_lambdas(&self) -> Vec<f64> {
        self.base_fits.iter().map(|f| f.lambda_hat).collect()
    }
}

fn ensure_normalized(k: &GramMatrix) -> Result<GramMatrix> {
    if k.trace_normalized {
        Ok(k.clone())
    } else {
        normalize_trace(k)
    }
}

fn fit_one(y: &DVector<f64>, k: &GramMatrix, criterion: TuningCriterion, grid: &LambdaGrid) -> Result<BaseFit> {
    let k = ensure_normalized(k)?;
    let spectrum = KernelSpectrum::new(&k)?;
    let evaluator = CriterionEvaluator::new(&spectrum, y)?;
    let (lambda_hat, objective) = evaluator.select(criterion, grid)?;
    let cv_residuals = spectrum.loo_residuals(&center(y), lambda_hat);
    if cv_residuals.iter().any(|e| !e.is_finite()) {
        return Err(CvekError::NonFinite("cross-validated residuals"));
    }
    Ok(BaseFit {
        spec: k.source.spec(),
        lambda_hat,
        objective,
        smoother: spectrum.smoother(lambda_hat),
        cv_residuals,
    })
}

/// Stage 1: per-kernel λ̂_d, smoother and leave-one-out residuals.
pub fn fit_base_kernels(
    y: &DVector<f64>,
    grams: &[GramMatrix],
    criterion: TuningCriterion,
    grid: &LambdaGrid,
) -> Result<Vec<BaseFit>> {
    if grams.is_empty() {
        return Err(CvekError::InvalidArgument("kernel library is empty".into()));
    }
    if let Some(k) = grams.iter().find(|k| k.n() != y.len()) {
        return Err(CvekError::DimensionMismatch {
            context: "gram matrix vs response length",
            expected: y.len(),
            found: k.n(),
        });
    }
    grams.par_iter().map(|k| fit_one(y, k, criterion, grid)).collect()
}

/// `Â = Σ u_d A_d`
pub fn ensemble_matrix(u: &WeightVector, fits: &[BaseFit]) -> Result<DMatrix<f64>> {
    if u.len() != fits.len() {
        return Err(CvekError::DimensionMismatch {
            context: "ensemble weights vs base fits",
            expected: fits.len(),
            found: u.len(),
        });
    }
    let n = fits[0].smoother.nrows();
    let mut a = DMatrix::zeros(n, n);
    for (w, fit) in u.values().iter().zip(fits) {
        a += &fit.smoother * *w;
    }
    Ok(a)
}

/// Ensemble kernel matrix and its scale `λ_K` from an ensemble smoother.
pub fn ensemble_kernel(a_hat: &DMatrix<f64>, base_lambdas: &[f64]) -> Result<(GramMatrix, f64)> {
    if !a_hat.is_square() {
        return Err(CvekError::DimensionMismatch {
            context: "ensemble matrix must be square",
            expected: a_hat.nrows(),
            found: a_hat.ncols(),
        });
    }
    if a_hat.iter().any(|v| !v.is_finite()) {
        return Err(CvekError::NonFinite("ensemble matrix"));
    }
    let eig = SymmetricEigen::new((a_hat + a_hat.transpose()) * 0.5);
    if let Some(&bad) = eig.eigenvalues.iter().find(|&&d| d > 1.0 + 1e-8) {
        return Err(CvekError::InvalidSmoother { eigenvalue: bad });
    }
    let ratios = eig.eigenvalues.map(|d| {
        let d = d.clamp(0.0, EIGEN_CLIP);
        d / (1.0 - d)
    });
    let inv_total = 1.0 / ratios.sum();
    let min_base = base_lambdas.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda_k = 1f64.min(inv_total).min(min_base);
    let u = &eig.eigenvectors;
    let n = a_hat.nrows();
    let scaled = DMatrix::from_fn(n, n, |i, k| u[(i, k)] * ratios[k] * lambda_k);
    let mut k_ens = scaled * u.transpose();
    // exact symmetry
    let n = k_ens.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (k_ens[(i, j)] + k_ens[(j, i)]);
            k_ens[(i, j)] = v;
            k_ens[(j, i)] = v;
        }
    }
    let gram = GramMatrix::from_matrix(k_ens, GramSource::Ensemble)?;
    Ok((gram, lambda_k))
}

/// The spectrum-clipped version of `a_hat` that `ensemble_kernel` reproduces exactly.
pub fn clipped_smoother(a_hat: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((a_hat + a_hat.transpose()) * 0.5);
    let clipped = eig.eigenvalues.map(|d| d.clamp(0.0, EIGEN_CLIP));
    let u = &eig.eigenvectors;
    let n = a_hat.nrows();
    DMatrix::from_fn(n, n, |i, k| u[(i, k)] * clipped[k]) * u.transpose()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeFit {
    pub intercept: f64,
    pub alpha: DVector<f64>,
    pub fitted: DVector<f64>,
}

/// Solves `(K + λI) α + 1 μ = y`, `1'α = 0` for the intercept `μ` and dual coefficients `α`.
pub fn estimate_ridge(k: &GramMatrix, y: &DVector<f64>, lambda: f64) -> Result<RidgeFit> {
    let n = k.n();
    if y.len() != n {
        return Err(CvekError::DimensionMismatch {
            context: "ridge response length",
            expected: n,
            found: y.len(),
        });
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(CvekError::SingularSystem { lambda });
    }
    let shifted = &k.values + DMatrix::identity(n, n) * lambda;
    let chol = shifted.cholesky().ok_or(CvekError::SingularSystem { lambda })?;
    let ones = DVector::from_element(n, 1.0);
    let m_one = chol.solve(&ones);
    let m_y = chol.solve(y);
    let denom = ones.dot(&m_one);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(CvekError::SingularSystem { lambda });
    }
    let intercept = ones.dot(&m_y) / denom;
    let alpha = m_y - m_one * intercept;
    let fitted = (&k.values * &alpha).add_scalar(intercept);
    Ok(RidgeFit {
        intercept,
        alpha,
        fitted,
    })
}

/// Residual variance `σ̂² = |y - ŷ|² / tr(I - H)` of the intercept + kernel-ridge
/// fit at `λ`, and `τ̂ = σ̂²/λ`.
pub fn estimate_noise(y: &DVector<f64>, k0: &GramMatrix, lambda: f64) -> Result<(f64, f64)> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(CvekError::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let spectrum = KernelSpectrum::new(k0)?;
    if y.len() != spectrum.n() {
        return Err(CvekError::DimensionMismatch {
            context: "noise response length",
            expected: spectrum.n(),
            found: y.len(),
        });
    }
    let n = spectrum.n();
    let dof = spectrum.residual_dof(lambda);
    if !(dof > 1e-8) {
        return Err(CvekError::SaturatedModel {
            n,
            trace: n as f64 - dof,
        });
    }
    let sigma2 = spectrum.ridge_residuals(y, lambda).norm_squared() / dof;
    Ok((sigma2, sigma2 / lambda))
}

/// Runs the full CVEK estimation on a library of Gram matrices.
pub fn fit_cvek(y: &DVector<f64>, grams: &[GramMatrix], options: &CvekOptions) -> Result<EnsembleFit> {
    let base_fits = fit_base_kernels(y, grams, options.criterion, &options.grid)?;
    let residuals: Vec<DVector<f64>> = base_fits.iter().map(|f| f.cv_residuals.clone()).collect();
    let u_hat = ensemble::weights(options.strategy, &residuals, options.beta)?;
    let a_hat = ensemble_matrix(&u_hat, &base_fits)?;
    let base_lambdas: Vec<f64> = base_fits.iter().map(|f| f.lambda_hat).collect();
    let (k_ens, lambda_k) = ensemble_kernel(&a_hat, &base_lambdas)?;

    let spectrum = KernelSpectrum::new(&k_ens)?;
    let (lambda_ens, _) = CriterionEvaluator::new(&spectrum, y)?.select(options.criterion, &options.grid)?;
    let ridge = estimate_ridge(&k_ens, y, lambda_ens)?;
    let (sigma2_hat, tau_hat) = estimate_noise(y, &k_ens, lambda_ens)?;

    Ok(EnsembleFit {
        base_fits,
        u_hat,
        a_hat,
        k_ens,
        lambda_k,
        lambda_ens,
        intercept: ridge.intercept,
        alpha: ridge.alpha,
        fitted: ridge.fitted,
        sigma2_hat,
        tau_hat,
    })
}
