//! Variance-component score test for interaction between two feature blocks.
//!
//! The null model is `y = μ + h₁(x₁) + h₂(x₂) + ε` with `h ~ N(0, τK₀)` and
//! `ε ~ N(0, σ²I)`. The garrote kernel `k₀ + δ k₁₂` makes the interaction a
//! variance component `δ`, and the score statistic for `δ = 0` is
//!
//! ```text
//! T = τ (y - 1β̂)' V₀⁻¹ ∂K₀ V₀⁻¹ (y - 1β̂),   V₀ = σ²I + τK₀,   ∂K₀ = K₁₂,
//! ```
//!
//! with `β̂` the GLS intercept. Two null distributions are available: a scaled
//! chi-square `κχ²_ν` matched to the first two moments of `T`, and a parametric
//! bootstrap that simulates `y* = μ̂ + ε` from the fitted null mean.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, Matrix3, Vector2};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{CvekError, Result};
use crate::estimator::{fit_cvek, CvekOptions, EnsembleFit};
use crate::kernel::{
    block_grams, interaction_gram, normalize_trace, BlockGrams, FeatureMatrix, GramMatrix, GramSource, KernelSpec,
};
use crate::rng;

/// Relative floor on σ̂², as a fraction of the response variance.
pub const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    /// Satterthwaite scaled chi-square.
    Asym,
    /// Parametric bootstrap.
    #[default]
    Boot,
}

impl TestKind {
    pub const ALL: [TestKind; 2] = [TestKind::Asym, TestKind::Boot];

    pub fn name(self) -> &'static str {
        match self {
            TestKind::Asym => "asym",
            TestKind::Boot => "boot",
        }
    }
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestKind {
    type Err = CvekError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "asym" => Ok(TestKind::Asym),
            "boot" => Ok(TestKind::Boot),
            _ => Err(CvekError::unknown("test kind", s, &["asym", "boot"])),
        }
    }
}

/// How the bootstrap p-value is formed from the replicate statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapRule {
    /// `#{T_b > T} / B`
    #[default]
    Raw,
    /// `(1 + #{T_b > T}) / (1 + B)`, never exactly zero.
    Corrected,
}

/// What the bootstrap re-estimates on each simulated response.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplicateFit {
    /// Re-estimate `σ̂²` (and `τ̂ = σ̂²/λ`) with the kernels and `λ` held fixed.
    #[default]
    Refit,
    /// Keep `σ̂²`, `τ̂` and `V₀` at the values fitted to the observed response.
    Fixed,
}

/// Which matrix plays the role of the derivative kernel `∂K₀`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKernel {
    /// `Σ û_d (K1_d ∘ K2_d)` with the fitted ensemble weights, trace-normalized.
    #[default]
    EnsembleWeighted,
    /// One product kernel `K1 ∘ K2` under a fixed spec, trace-normalized.
    Fixed(KernelSpec),
}

/// Fitted null model in the form the score test needs.
#[derive(Clone, Debug)]
pub struct NullModel {
    pub mu_hat: DVector<f64>,
    pub k0: GramMatrix,
    pub dk0: GramMatrix,
    pub v0: DMatrix<f64>,
    pub tau_hat: f64,
    pub sigma2_hat: f64,
    chol: Cholesky<f64, Dyn>,
    v_inv_one: DVector<f64>,
    one_v_inv_one: f64,
    residual_dof: f64,
}

impl NullModel {
    pub fn new(mu_hat: DVector<f64>, k0: GramMatrix, dk0: GramMatrix, sigma2_hat: f64, tau_hat: f64) -> Result<Self> {
        let n = mu_hat.len();
        for (context, found) in [("null kernel size", k0.n()), ("derivative kernel size", dk0.n())] {
            if found != n {
                return Err(CvekError::DimensionMismatch {
                    context,
                    expected: n,
                    found,
                });
            }
        }
        if !(sigma2_hat.is_finite() && sigma2_hat > 0.0) {
            return Err(CvekError::NotPositiveDefinite("V0 needs sigma2 > 0"));
        }
        if !(tau_hat.is_finite() && tau_hat >= 0.0) {
            return Err(CvekError::InvalidArgument(format!(
                "tau must be nonnegative, got {tau_hat}"
            )));
        }
        let v0 = DMatrix::identity(n, n) * sigma2_hat + &k0.values * tau_hat;
        let chol = v0.clone().cholesky().ok_or(CvekError::NotPositiveDefinite("V0"))?;
        let v_inv_one = chol.solve(&DVector::from_element(n, 1.0));
        let one_v_inv_one = v_inv_one.sum();
        let residual_dof = sigma2_hat * (chol.inverse().trace() - v_inv_one.norm_squared() / one_v_inv_one);
        Ok(NullModel {
            mu_hat,
            k0,
            dk0,
            v0,
            tau_hat,
            sigma2_hat,
            chol,
            v_inv_one,
            one_v_inv_one,
            residual_dof,
        })
    }

    /// Null model from a CVEK fit: `μ̂` is the fitted mean, `K₀ = K̂`, `λ = σ̂²/τ̂` the ensemble penalty.
    pub fn from_fit(fit: &EnsembleFit, y: &DVector<f64>, dk0: GramMatrix) -> Result<Self> {
        let n = y.len() as f64;
        let var_y = if n > 1.0 {
            crate::tuning::center(y).norm_squared() / (n - 1.0)
        } else {
            0.0
        };
        let floor = SIGMA2_FLOOR * var_y.max(f64::MIN_POSITIVE);
        let sigma2 = fit.sigma2_hat.max(floor);
        let tau = sigma2 / fit.lambda_ens;
        Self::new(fit.fitted.clone(), fit.k_ens.clone(), dk0, sigma2, tau)
    }

    pub fn n(&self) -> usize {
        self.mu_hat.len()
    }

    fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// GLS intercept `β̂ = 1'V₀⁻¹y / 1'V₀⁻¹1`.
    pub fn intercept(&self, y: &DVector<f64>) -> f64 {
        self.v_inv_one.dot(y) / self.one_v_inv_one
    }

    /// `y - 1β̂`, the fixed-effect residual the score is built from.
    pub fn residual(&self, y: &DVector<f64>) -> DVector<f64> {
        y.add_scalar(-self.intercept(y))
    }

    /// Residual variance of a kernel-ridge refit to `y` at the model's `λ`.
    ///
    /// The ridge residual is `σ̂² P₀ y`, so this equals `σ̂²` at the response the
    /// model was fitted to.
    pub fn noise_variance(&self, y: &DVector<f64>) -> f64 {
        let r = self.solve(&self.residual(y)) * self.sigma2_hat;
        r.norm_squared() / self.residual_dof
    }

    /// `T` after refitting `σ²` and `τ` to `y`; both scale `V₀` by `c = σ̂²(y)/σ̂²`, so `T` scales by `1/c`.
    fn refit_statistic(&self, y: &DVector<f64>) -> f64 {
        let t = self.quadratic_statistic(&self.residual(y));
        let ratio = self.noise_variance(y) / self.sigma2_hat;
        if ratio > 0.0 {
            t / ratio
        } else {
            0.0
        }
    }

    fn quadratic_statistic(&self, residual: &DVector<f64>) -> f64 {
        let w = self.solve(residual);
        let t = self.tau_hat * w.dot(&(&self.dk0.values * &w));
        t.max(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub pvalue: f64,
    pub method: TestKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa_hat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_hat: Option<f64>,
    pub seed: u64,
}

/// `T = τ (y - μ̂)' V₀⁻¹ ∂K₀ V₀⁻¹ (y - μ̂)`, solved through the Cholesky factor of `V₀`.
pub fn test_statistic(y: &DVector<f64>, model: &NullModel) -> Result<f64> {
    if y.len() != model.n() {
        return Err(CvekError::DimensionMismatch {
            context: "response vs null model",
            expected: model.n(),
            found: y.len(),
        });
    }
    Ok(model.quadratic_statistic(&model.residual(y)))
}

/// Moment-matching quantities for the scaled chi-square approximation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Satterthwaite {
    pub kappa: f64,
    pub nu: f64,
    /// `E(T) = τ tr(V₀⁻¹ ∂K₀)`
    pub mean: f64,
    /// Efficient information of `δ` on the scale of `T`, i.e. `Var(T)`.
    pub information: f64,
}

/// REML information entries `I_ab = 2 tr(P₀ M_a P₀ M_b)` for
/// `(M_δ, M_τ, M_σ²) = (τ∂K₀, K₀, I)`, with the intercept-only projection
/// `P₀ = V₀⁻¹ - V₀⁻¹1 (1'V₀⁻¹1)⁻¹ 1'V₀⁻¹`.
///
/// The factor 2 (rather than the usual 1/2 for the score itself) puts the
/// information on the scale of `T`, which is twice the score.
pub fn reml_information(model: &NullModel) -> Matrix3<f64> {
    let n = model.n();
    let v_inv = model.chol.inverse();
    let ones = DVector::from_element(n, 1.0);
    let v_inv_one = &v_inv * &ones;
    let denom = ones.dot(&v_inv_one);
    let p0 = &v_inv - (&v_inv_one * v_inv_one.transpose()) / denom;
    let pm = [
        &p0 * (&model.dk0.values * model.tau_hat),
        &p0 * &model.k0.values,
        p0.clone(),
    ];
    let mut info = Matrix3::zeros();
    for a in 0..3 {
        for b in a..3 {
            // tr(X Y) = Σ_ij X_ij Y_ji
            let tr = pm[a].component_mul(&pm[b].transpose()).sum();
            info[(a, b)] = 2.0 * tr;
            info[(b, a)] = 2.0 * tr;
        }
    }
    info
}

/// Efficient information `I_δδ - I_δθ' I_θθ⁻¹ I_δθ` from a full information matrix.
pub fn efficient_information(info: &Matrix3<f64>) -> f64 {
    let i_dd = info[(0, 0)];
    let i_dt = Vector2::new(info[(0, 1)], info[(0, 2)]);
    let i_tt = info.fixed_view::<2, 2>(1, 1).into_owned();
    // pseudo-inverse guards against a degenerate nuisance block (e.g. K₀ ∝ I)
    let inv = i_tt
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| i_tt.pseudo_inverse(1e-12).unwrap_or_else(|_| Matrix2::zeros()));
    i_dd - (i_dt.transpose() * inv * i_dt)[(0, 0)]
}

/// `τ tr(V₀⁻¹ ∂K₀)`
pub fn expected_statistic(model: &NullModel) -> f64 {
    let solved = model.chol.solve(&model.dk0.values);
    model.tau_hat * solved.trace()
}

pub fn satterthwaite_null(model: &NullModel) -> Result<Satterthwaite> {
    let mean = expected_statistic(model);
    let info = reml_information(model);
    let information = efficient_information(&info);
    // relative floor: cancellation leaves rounding noise when ∂K₀ lies in the nuisance span
    let floor = 1e-10 * info[(0, 0)].abs();
    if !(mean > 0.0 && mean.is_finite()) || !(information > floor && information.is_finite()) {
        return Err(CvekError::DegenerateNull { mean, information });
    }
    // solves κν = E(T), 2κ²ν = Var(T)
    let kappa = information / (2.0 * mean);
    let nu = 2.0 * mean * mean / information;
    Ok(Satterthwaite {
        kappa,
        nu,
        mean,
        information,
    })
}

/// `P(χ²_ν > T / κ) = Q(ν/2, T / (2κ))`.
pub fn asymptotic_pvalue(statistic: f64, kappa: f64, nu: f64) -> Result<f64> {
    if !statistic.is_finite() || !kappa.is_finite() || !nu.is_finite() {
        return Err(CvekError::NonFinite("asymptotic p-value inputs"));
    }
    if !(kappa > 0.0 && nu > 0.0) {
        return Err(CvekError::InvalidArgument(format!(
            "kappa and nu must be positive, got {kappa}, {nu}"
        )));
    }
    if statistic <= 0.0 {
        return Ok(1.0);
    }
    Ok(gamma_ur(nu / 2.0, statistic / (2.0 * kappa)).clamp(0.0, 1.0))
}

/// Bootstrap settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub seed: u64,
    pub rule: BootstrapRule,
    pub fit: ReplicateFit,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            replicates: 100,
            seed: 0,
            rule: BootstrapRule::Raw,
            fit: ReplicateFit::Refit,
        }
    }
}

/// Replicate statistics `T_b` for `y*_b = μ̂ + ε_b`, `ε_b ~ N(0, σ̂²I)`.
///
/// Replicate `b` draws from its own stream, so the output does not depend on
/// scheduling.
pub fn bootstrap_statistics(model: &NullModel, options: &BootstrapOptions) -> Result<Vec<f64>> {
    if options.replicates == 0 {
        return Err(CvekError::InvalidArgument(
            "bootstrap needs at least one replicate".into(),
        ));
    }
    let sd = model.sigma2_hat.sqrt();
    let n = model.n();
    Ok((0..options.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(options.seed, rng::DOMAIN_BOOTSTRAP, b as u64);
            let noise = DVector::from_fn(n, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            });
            let y_star = &model.mu_hat + noise;
            match options.fit {
                ReplicateFit::Refit => model.refit_statistic(&y_star),
                ReplicateFit::Fixed => model.quadratic_statistic(&model.residual(&y_star)),
            }
        })
        .collect())
}

/// Share of replicate statistics strictly above the observed one.
pub fn bootstrap_pvalue_from(observed: f64, replicate_stats: &[f64], rule: BootstrapRule) -> f64 {
    let exceed = replicate_stats.iter().filter(|&&t| t > observed).count() as f64;
    let b = replicate_stats.len() as f64;
    match rule {
        BootstrapRule::Raw => exceed / b,
        BootstrapRule::Corrected => (1.0 + exceed) / (1.0 + b),
    }
}

/// Returns the p-value together with the replicate statistics.
pub fn bootstrap_pvalue(y: &DVector<f64>, model: &NullModel, options: &BootstrapOptions) -> Result<(f64, Vec<f64>)> {
    let observed = test_statistic(y, model)?;
    let stats = bootstrap_statistics(model, options)?;
    Ok((bootstrap_pvalue_from(observed, &stats, options.rule), stats))
}

/// Computes the requested p-value for a ready null model.
pub fn test_null_model(
    y: &DVector<f64>,
    model: &NullModel,
    kind: TestKind,
    bootstrap: &BootstrapOptions,
) -> Result<TestResult> {
    let statistic = test_statistic(y, model)?;
    match kind {
        TestKind::Asym => {
            let s = satterthwaite_null(model)?;
            Ok(TestResult {
                statistic,
                pvalue: asymptotic_pvalue(statistic, s.kappa, s.nu)?,
                method: kind,
                replicates: None,
                kappa_hat: Some(s.kappa),
                nu_hat: Some(s.nu),
                seed: bootstrap.seed,
            })
        }
        TestKind::Boot => {
            let stats = bootstrap_statistics(model, bootstrap)?;
            Ok(TestResult {
                statistic,
                pvalue: bootstrap_pvalue_from(statistic, &stats, bootstrap.rule),
                method: kind,
                replicates: Some(bootstrap.replicates),
                kappa_hat: None,
                nu_hat: None,
                seed: bootstrap.seed,
            })
        }
    }
}

/// Everything needed to run the interaction test end to end.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestOptions {
    pub cvek: CvekOptions,
    pub kind: TestKind,
    pub bootstrap: BootstrapOptions,
    pub interaction: InteractionKernel,
}

#[derive(Clone, Debug)]
pub struct InteractionTest {
    pub result: TestResult,
    pub fit: EnsembleFit,
    pub library: Vec<KernelSpec>,
}

fn ensure_standardized(x: &FeatureMatrix) -> Result<FeatureMatrix> {
    if x.standardized {
        Ok(x.clone())
    } else {
        x.standardize()
    }
}

/// Null-model fit on two feature blocks, with the per-kernel block Grams kept for `∂K₀`.
#[derive(Clone, Debug)]
pub struct AdditiveFit {
    pub fit: EnsembleFit,
    pub blocks: Vec<BlockGrams>,
    pub x1: FeatureMatrix,
    pub x2: FeatureMatrix,
}

/// Fits the CVEK ensemble over the additive kernels `K1_d + K2_d`.
///
/// Blocks not already flagged as standardized are standardized first.
pub fn fit_additive(
    y: &DVector<f64>,
    x1: &FeatureMatrix,
    x2: &FeatureMatrix,
    library: &[KernelSpec],
    options: &CvekOptions,
) -> Result<AdditiveFit> {
    if library.is_empty() {
        return Err(CvekError::InvalidArgument("kernel library is empty".into()));
    }
    for (context, found) in [("first block rows", x1.nrows()), ("second block rows", x2.nrows())] {
        if found != y.len() {
            return Err(CvekError::DimensionMismatch {
                context,
                expected: y.len(),
                found,
            });
        }
    }
    let x1 = ensure_standardized(x1)?;
    let x2 = ensure_standardized(x2)?;
    let blocks = library
        .par_iter()
        .map(|spec| block_grams(spec, &x1, &x2))
        .collect::<Result<Vec<_>>>()?;
    let additive: Vec<GramMatrix> = blocks.iter().map(|b| b.additive.clone()).collect();
    let fit = fit_cvek(y, &additive, options)?;
    Ok(AdditiveFit { fit, blocks, x1, x2 })
}

/// `∂K₀` for a fitted additive model.
pub fn derivative_kernel(fitted: &AdditiveFit, interaction: &InteractionKernel) -> Result<GramMatrix> {
    match interaction {
        InteractionKernel::EnsembleWeighted => {
            let n = fitted.fit.fitted.len();
            let mut acc = DMatrix::zeros(n, n);
            for (w, b) in fitted.fit.u_hat.values().iter().zip(&fitted.blocks) {
                if *w > 0.0 {
                    acc += interaction_gram(&b.first, &b.second)?.values * *w;
                }
            }
            normalize_trace(&GramMatrix::from_matrix(acc, GramSource::Interaction(None))?)
        }
        InteractionKernel::Fixed(spec) => {
            let b = block_grams(spec, &fitted.x1, &fitted.x2)?;
            normalize_trace(&interaction_gram(&b.first, &b.second)?)
        }
    }
}

/// Fits the additive null model over `library` and tests for a `x1 × x2` interaction.
pub fn run_test(
    y: &DVector<f64>,
    x1: &FeatureMatrix,
    x2: &FeatureMatrix,
    library: &[KernelSpec],
    options: &TestOptions,
) -> Result<InteractionTest> {
    let fitted = fit_additive(y, x1, x2, library, &options.cvek)?;
    let dk0 = derivative_kernel(&fitted, &options.interaction)?;
    let model = NullModel::from_fit(&fitted.fit, y, dk0)?;
    let result = test_null_model(y, &model, options.kind, &options.bootstrap)?;
    Ok(InteractionTest {
        result,
        fit: fitted.fit,
        library: library.to_vec(),
    })
}
