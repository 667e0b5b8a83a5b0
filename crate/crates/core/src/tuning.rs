//! Smoother matrices and tuning-parameter selection criteria.
//!
//! All criteria are evaluated through one eigendecomposition `K = U diag(d) U'`
//! per kernel, so scanning a grid of λ values costs O(n²) per value. With
//! `s_k = 1 / (d_k + λ)` the smoother is `A_λ = U diag(d s) U'` and
//! `I - A_λ = λ U diag(s) U'`.
//!
//! `loocv` uses the exact leave-one-out residuals of the joint
//! intercept + kernel-ridge fit. Its hat matrix is
//! `H = A_λ + λ M 1 1' M / (1' M 1)` with `M = (K + λI)^{-1}`, and the
//! residual of observation i refitted without i is `((I - H) y)_i / (1 - H_ii)`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CvekError, Result};
use crate::kernel::GramMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningCriterion {
    Loocv,
    Aic,
    Aicc,
    Bic,
    Gcv,
    Gcvc,
    Gmpml,
}

impl TuningCriterion {
    pub const ALL: [TuningCriterion; 7] = [
        TuningCriterion::Loocv,
        TuningCriterion::Aic,
        TuningCriterion::Aicc,
        TuningCriterion::Bic,
        TuningCriterion::Gcv,
        TuningCriterion::Gcvc,
        TuningCriterion::Gmpml,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TuningCriterion::Loocv => "loocv",
            TuningCriterion::Aic => "aic",
            TuningCriterion::Aicc => "aicc",
            TuningCriterion::Bic => "bic",
            TuningCriterion::Gcv => "gcv",
            TuningCriterion::Gcvc => "gcvc",
            TuningCriterion::Gmpml => "gmpml",
        }
    }
}

impl fmt::Display for TuningCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TuningCriterion {
    type Err = CvekError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        TuningCriterion::ALL
            .into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| {
                let names: Vec<&str> = TuningCriterion::ALL.iter().map(|c| c.name()).collect();
                CvekError::unknown("criterion", s, &names)
            })
    }
}

/// Strictly ascending, strictly positive candidate λ values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LambdaGrid(Vec<f64>);

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CvekError::InvalidGrid("grid is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(CvekError::InvalidGrid(format!(
                "value {v} is not a positive finite number"
            )));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CvekError::InvalidGrid("values must be strictly ascending".into()));
        }
        Ok(LambdaGrid(values))
    }

    /// `exp(lo), exp(lo + step), ..., exp(hi)`.
    pub fn log_spaced(lo: f64, hi: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(hi >= lo) {
            return Err(CvekError::InvalidGrid(format!("bad log range {lo}..{hi} step {step}")));
        }
        let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
        Self::new((0..count).map(|i| (lo + i as f64 * step).exp()).collect())
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

/// `exp(-10), exp(-9.5), ..., exp(5)`.
impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::log_spaced(-10.0, 5.0, 0.5).expect("default grid is valid")
    }
}

impl TryFrom<Vec<f64>> for LambdaGrid {
    type Error = CvekError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        LambdaGrid::new(values)
    }
}

impl From<LambdaGrid> for Vec<f64> {
    fn from(grid: LambdaGrid) -> Vec<f64> {
        grid.0
    }
}

/// Eigendecomposition of a Gram matrix, reused across λ values.
#[derive(Clone, Debug)]
pub struct KernelSpectrum {
    /// Eigenvalues, with round-off negatives clamped to zero.
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// `U' 1`
    ones_rotated: DVector<f64>,
}

impl KernelSpectrum {
    pub fn new(k: &GramMatrix) -> Result<Self> {
        Self::from_matrix(&k.values)
    }

    pub fn from_matrix(k: &DMatrix<f64>) -> Result<Self> {
        if !k.is_square() {
            return Err(CvekError::DimensionMismatch {
                context: "kernel spectrum",
                expected: k.nrows(),
                found: k.ncols(),
            });
        }
        if k.iter().any(|v| !v.is_finite()) {
            return Err(CvekError::NonFinite("kernel matrix"));
        }
        let sym = (k + k.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let eigenvalues = eig.eigenvalues.map(|d| d.max(0.0));
        let ones_rotated = eig.eigenvectors.tr_mul(&DVector::from_element(k.nrows(), 1.0));
        Ok(KernelSpectrum {
            eigenvalues,
            eigenvectors: eig.eigenvectors,
            ones_rotated,
        })
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U diag(f(d_k)) U'`
    pub fn reconstruct(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let u = &self.eigenvectors;
        let scaled = DMatrix::from_fn(self.n(), self.n(), |i, k| u[(i, k)] * f(self.eigenvalues[k]));
        scaled * u.transpose()
    }

    /// `A_λ = K (K + λI)^{-1}`
    pub fn smoother(&self, lambda: f64) -> DMatrix<f64> {
        self.reconstruct(|d| d / (d + lambda))
    }

    pub fn smoother_trace(&self, lambda: f64) -> f64 {
        self.eigenvalues.iter().map(|d| d / (d + lambda)).sum()
    }

    fn smoother_diagonal(&self, lambda: f64) -> DVector<f64> {
        let u = &self.eigenvectors;
        DVector::from_fn(self.n(), |i, _| {
            (0..self.n())
                .map(|k| {
                    let d = self.eigenvalues[k];
                    u[(i, k)] * u[(i, k)] * d / (d + lambda)
                })
                .sum()
        })
    }

    /// `y - ŷ` for the joint intercept + kernel-ridge fit: `λ (M y - M1 (1'My)/(1'M1))`, `M = (K + λI)⁻¹`.
    pub fn ridge_residuals(&self, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
        self.ridge_parts(y, lambda).0
    }

    /// `tr(I - H)` where `H` is the hat matrix of the intercept + kernel-ridge fit.
    pub fn residual_dof(&self, lambda: f64) -> f64 {
        let s = self.eigenvalues.map(|d| 1.0 / (d + lambda));
        let o2 = self.ones_rotated.map(|o| o * o);
        let one_m_one = s.dot(&o2);
        let one_m2_one = s.component_mul(&s).dot(&o2);
        lambda * (s.sum() - one_m2_one / one_m_one)
    }

    fn ridge_parts(&self, y: &DVector<f64>, lambda: f64) -> (DVector<f64>, DVector<f64>, f64) {
        let u = &self.eigenvectors;
        let uty = u.tr_mul(y);
        let s = self.eigenvalues.map(|d| 1.0 / (d + lambda));
        let m_one = u * s.component_mul(&self.ones_rotated);
        let m_y = u * s.component_mul(&uty);
        let one_m_one: f64 = s.component_mul(&self.ones_rotated).dot(&self.ones_rotated);
        let one_m_y: f64 = s.component_mul(&self.ones_rotated).dot(&uty);
        let resid = (&m_y - &m_one * (one_m_y / one_m_one)) * lambda;
        (resid, m_one, one_m_one)
    }

    /// Exact leave-one-out residuals of the joint intercept + kernel-ridge fit.
    ///
    /// Non-finite entries mark observations whose leverage reached one.
    pub fn loo_residuals(&self, y: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let (resid, m_one, one_m_one) = self.ridge_parts(y, lambda);
        let a_diag = self.smoother_diagonal(lambda);
        DVector::from_fn(self.n(), |i, _| {
            let h_ii = a_diag[i] + lambda * m_one[i] * m_one[i] / one_m_one;
            let denom = 1.0 - h_ii;
            if denom > f64::EPSILON {
                resid[i] / denom
            } else {
                f64::INFINITY
            }
        })
    }
}

/// `A_λ = K (K + λI)^{-1}` via the eigendecomposition of `K`.
pub fn smoother_matrix(k: &GramMatrix, lambda: f64) -> Result<DMatrix<f64>> {
    check_lambda(lambda)?;
    Ok(KernelSpectrum::new(k)?.smoother(lambda))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda > 0.0 {
        Ok(())
    } else {
        Err(CvekError::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )))
    }
}

pub fn center(y: &DVector<f64>) -> DVector<f64> {
    let mean = y.mean();
    y.add_scalar(-mean)
}

/// Evaluates criteria for one response against one kernel spectrum.
#[derive(Clone, Debug)]
pub struct CriterionEvaluator<'a> {
    spectrum: &'a KernelSpectrum,
    y: DVector<f64>,
    uty_sq: DVector<f64>,
}

impl<'a> CriterionEvaluator<'a> {
    /// `y` is centered here; the criteria assume a centered response.
    pub fn new(spectrum: &'a KernelSpectrum, y: &DVector<f64>) -> Result<Self> {
        if y.len() != spectrum.n() {
            return Err(CvekError::DimensionMismatch {
                context: "response length vs kernel size",
                expected: spectrum.n(),
                found: y.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CvekError::NonFinite("response"));
        }
        let y = center(y);
        let uty_sq = spectrum.eigenvectors.tr_mul(&y).map(|v| v * v);
        Ok(CriterionEvaluator { spectrum, y, uty_sq })
    }

    /// `y' (I - A)^2 y`
    fn residual_ss(&self, lambda: f64) -> f64 {
        self.spectrum
            .eigenvalues
            .iter()
            .zip(self.uty_sq.iter())
            .map(|(d, q)| {
                let shrink = lambda / (d + lambda);
                q * shrink * shrink
            })
            .sum()
    }

    /// `y' (I - A) y`
    fn residual_form(&self, lambda: f64) -> f64 {
        self.spectrum
            .eigenvalues
            .iter()
            .zip(self.uty_sq.iter())
            .map(|(d, q)| q * lambda / (d + lambda))
            .sum()
    }

    /// `log |I - A|`, summed in the eigenbasis.
    fn log_det_complement(&self, lambda: f64) -> f64 {
        self.spectrum
            .eigenvalues
            .iter()
            .map(|d| (lambda / (d + lambda)).ln())
            .sum()
    }

    /// Objective value; `+inf` marks an inadmissible λ.
    pub fn value(&self, criterion: TuningCriterion, lambda: f64) -> f64 {
        let n = self.spectrum.n() as f64;
        let tr = self.spectrum.smoother_trace(lambda);
        let rss = self.residual_ss(lambda);
        let value = match criterion {
            TuningCriterion::Loocv => {
                let e = self.spectrum.loo_residuals(&self.y, lambda);
                e.norm_squared().ln()
            }
            TuningCriterion::Aic => rss.ln() + 2.0 * (tr + 2.0) / n,
            TuningCriterion::Aicc => {
                let denom = n - tr - 3.0;
                if denom <= 0.0 {
                    return f64::INFINITY;
                }
                rss.ln() + 2.0 * (tr + 2.0) / denom
            }
            TuningCriterion::Bic => rss.ln() + n.ln() * (tr + 2.0) / n,
            TuningCriterion::Gcv => {
                let arg = 1.0 - tr / n - 1.0 / n;
                if arg <= 0.0 {
                    return f64::INFINITY;
                }
                rss.ln() - 2.0 * arg.ln()
            }
            TuningCriterion::Gcvc => {
                let arg = (1.0 - tr / n - 2.0 / n).max(0.0);
                if arg == 0.0 {
                    return f64::INFINITY;
                }
                rss.ln() - 2.0 * arg.ln()
            }
            TuningCriterion::Gmpml => self.residual_form(lambda).ln() - self.log_det_complement(lambda) / (n - 1.0),
        };
        if value.is_nan() {
            f64::INFINITY
        } else {
            value
        }
    }

    /// The LOOCV formula with the bracket `I - diag(A) - I/n` taken literally.
    ///
    /// It disagrees with explicit leave-one-out refits whenever `A 1 != 0`; it
    /// is kept for comparison only and is not used for selection.
    pub fn loocv_verbatim(&self, lambda: f64) -> f64 {
        let n = self.spectrum.n() as f64;
        let a = self.spectrum.smoother(lambda);
        let resid = &self.y - &a * &self.y;
        let total: f64 = resid
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let denom = 1.0 - a[(i, i)] - 1.0 / n;
                (r / denom).powi(2)
            })
            .sum();
        let v = total.ln();
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    /// Scans the grid in ascending order; ties keep the smaller λ.
    pub fn select(&self, criterion: TuningCriterion, grid: &LambdaGrid) -> Result<(f64, f64)> {
        let mut best: Option<(f64, f64)> = None;
        for &lambda in grid.values() {
            let v = self.value(criterion, lambda);
            if !v.is_finite() {
                continue;
            }
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((lambda, v));
            }
        }
        best.ok_or(CvekError::NoAdmissibleLambda {
            criterion: criterion.name(),
        })
    }
}

pub fn criterion_value(criterion: TuningCriterion, y: &DVector<f64>, k: &GramMatrix, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let spectrum = KernelSpectrum::new(k)?;
    Ok(CriterionEvaluator::new(&spectrum, y)?.value(criterion, lambda))
}

/// Returns `(λ̂, objective at λ̂)`.
pub fn select_lambda(
    criterion: TuningCriterion,
    y: &DVector<f64>,
    k: &GramMatrix,
    grid: &LambdaGrid,
) -> Result<(f64, f64)> {
    let spectrum = KernelSpectrum::new(k)?;
    CriterionEvaluator::new(&spectrum, y)?.select(criterion, grid)
}

/// Picks the minimal finite entry of precomputed objective values, smallest index on ties.
pub fn argmin_finite(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            continue;
        }
        if best.is_none_or(|b| *v < values[b]) {
            best = Some(i);
        }
    }
    best
}
