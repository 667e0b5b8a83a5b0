//! Synthetic interaction data and Monte Carlo rejection-rate estimation.
//!
//! Data follow `y = h₁(x₁) + h₂(x₂) + δ h₁₂(x₁, x₂) + ε` with standard
//! Gaussian features. Each main effect is drawn as `h = K w`, `w ~ N(0, I)`, on
//! the sampled design under the data-generating kernel. The main effects and
//! the product `h₁₂ = h₁ ∘ h₂` are each scaled to unit Euclidean norm, so `δ` is
//! the interaction strength relative to a main effect.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleStrategy;
use crate::error::{CvekError, Result};
use crate::estimator::CvekOptions;
use crate::hypothesis::{run_test, BootstrapOptions, InteractionKernel, TestKind, TestOptions};
use crate::kernel::{gram_matrix, FeatureMatrix, KernelSpec, MaternNu};
use crate::rng;
use crate::tuning::{LambdaGrid, TuningCriterion};

/// Rejection threshold for the reported rejection rate.
pub const LEVEL: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub y: DVector<f64>,
    pub x1: FeatureMatrix,
    pub x2: FeatureMatrix,
    pub h1: DVector<f64>,
    pub h2: DVector<f64>,
    /// The interaction term as added to `y` before the `δ` factor.
    pub h12: DVector<f64>,
}

fn gaussian_matrix(rng: &mut impl Rng, n: usize, p: usize) -> DMatrix<f64> {
    // row-major fill so the draw order does not depend on storage layout
    let values: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_row_slice(n, p, &values)
}

fn gaussian_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn unit_function(spec: &KernelSpec, x: &FeatureMatrix, w: &DVector<f64>) -> Result<DVector<f64>> {
    let k = gram_matrix(spec, x)?;
    let h = &k.values * w;
    let norm = h.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(CvekError::NonFinite("sampled main effect"));
    }
    Ok(h / norm)
}

/// Scaling of the interaction term `h₁ ∘ h₂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionScale {
    /// Unit Euclidean norm, like the main effects.
    #[default]
    Unit,
    /// The raw elementwise product of the unit-norm main effects.
    Product,
}

/// Draws one data set with a unit-norm interaction term.
pub fn generate_data(
    n: usize,
    p1: usize,
    p2: usize,
    k_true: &KernelSpec,
    delta: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<SimulatedData> {
    generate_data_scaled(n, p1, p2, k_true, delta, noise_sd, seed, InteractionScale::Unit)
}

/// Draws one data set. All random numbers are drawn in a fixed order that
/// does not depend on `delta`, so two calls with the same seed differ only
/// by the interaction term.
#[allow(clippy::too_many_arguments)]
pub fn generate_data_scaled(
    n: usize,
    p1: usize,
    p2: usize,
    k_true: &KernelSpec,
    delta: f64,
    noise_sd: f64,
    seed: u64,
    scale: InteractionScale,
) -> Result<SimulatedData> {
    if n < 2 || p1 == 0 || p2 == 0 {
        return Err(CvekError::InvalidArgument(format!(
            "invalid dimensions n={n}, p1={p1}, p2={p2}"
        )));
    }
    if !(delta.is_finite() && noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(CvekError::InvalidArgument(format!(
            "invalid delta {delta} or noise sd {noise_sd}"
        )));
    }
    k_true.validate()?;
    let mut rng = rng::stream(seed, rng::DOMAIN_DATA, 0);
    let x1 = FeatureMatrix::new(
        gaussian_matrix(&mut rng, n, p1),
        (1..=p1).map(|j| format!("x1_{j}")).collect(),
    )?;
    let x2 = FeatureMatrix::new(
        gaussian_matrix(&mut rng, n, p2),
        (1..=p2).map(|j| format!("x2_{j}")).collect(),
    )?;
    let w1 = gaussian_vector(&mut rng, n);
    let w2 = gaussian_vector(&mut rng, n);
    let eps = gaussian_vector(&mut rng, n) * noise_sd;
    let h1 = unit_function(k_true, &x1, &w1)?;
    let h2 = unit_function(k_true, &x2, &w2)?;
    let mut h12 = h1.component_mul(&h2);
    if scale == InteractionScale::Unit {
        let norm = h12.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(CvekError::NonFinite("sampled interaction"));
        }
        h12 /= norm;
    }
    let y = &h1 + &h2 + &h12 * delta + eps;
    Ok(SimulatedData { y, x1, x2, h1, h2, h12 })
}

/// One simulation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: usize,
    pub data_kernel: String,
    pub k_true: KernelSpec,
    pub delta: f64,
    pub noise_sd: f64,
    pub interaction_scale: InteractionScale,
    pub n: usize,
    pub p1: usize,
    pub p2: usize,
    pub library_name: String,
    pub library: Vec<KernelSpec>,
    pub criterion: TuningCriterion,
    pub strategy: EnsembleStrategy,
    pub test_kind: TestKind,
    pub beta: f64,
    pub grid: LambdaGrid,
    pub replicates_b: usize,
    pub reps: usize,
    pub master_seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(CvekError::InvalidArgument(format!(
                "scenario needs n >= 4, got {}",
                self.n
            )));
        }
        if self.reps == 0 {
            return Err(CvekError::InvalidArgument("scenario needs reps >= 1".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(CvekError::InvalidArgument(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        if self.library.is_empty() {
            return Err(CvekError::InvalidArgument("scenario library is empty".into()));
        }
        self.k_true.validate()?;
        self.library.iter().try_for_each(|s| s.validate())
    }

    fn test_options(&self, seed: u64) -> TestOptions {
        TestOptions {
            cvek: CvekOptions {
                criterion: self.criterion,
                strategy: self.strategy,
                beta: self.beta,
                grid: self.grid.clone(),
            },
            kind: self.test_kind,
            bootstrap: BootstrapOptions {
                replicates: self.replicates_b,
                seed,
                ..BootstrapOptions::default()
            },
            interaction: InteractionKernel::EnsembleWeighted,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FailureMode {
    /// Abort on the first failing replicate.
    #[default]
    FailFast,
    /// Record failures and keep going.
    SkipErrors,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicateFailure {
    pub rep: usize,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    /// Share of successful replicates with `p <= LEVEL`.
    pub rejection_rate: f64,
    /// Per replicate; `None` for failed replicates in skip-errors mode.
    pub pvalues: Vec<Option<f64>>,
    pub failures: Vec<ReplicateFailure>,
    pub wall_time: Duration,
}

/// p-value of replicate `rep`; seeds depend only on `(master_seed, rep)`.
pub fn run_replicate(s: &Scenario, rep: usize) -> Result<f64> {
    let data_seed = rng::derive_seed(s.master_seed, rng::DOMAIN_DATA, rep as u64);
    let test_seed = rng::derive_seed(s.master_seed, rng::DOMAIN_TEST_SEED, rep as u64);
    let data = generate_data_scaled(
        s.n,
        s.p1,
        s.p2,
        &s.k_true,
        s.delta,
        s.noise_sd,
        data_seed,
        s.interaction_scale,
    )?;
    let x1 = data.x1.standardize()?;
    let x2 = data.x2.standardize()?;
    let outcome = run_test(&data.y, &x1, &x2, &s.library, &s.test_options(test_seed))?;
    Ok(outcome.result.pvalue)
}

pub fn rejection_rate(pvalues: &[f64]) -> f64 {
    if pvalues.is_empty() {
        return f64::NAN;
    }
    pvalues.iter().filter(|p| **p <= LEVEL).count() as f64 / pvalues.len() as f64
}

pub fn run_scenario(s: &Scenario, mode: FailureMode) -> Result<ScenarioResult> {
    s.validate()?;
    let start = Instant::now();
    let outcomes: Vec<Result<f64>> = (0..s.reps).into_par_iter().map(|r| run_replicate(s, r)).collect();
    let mut pvalues = Vec::with_capacity(s.reps);
    let mut failures = Vec::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(p) => pvalues.push(Some(p)),
            Err(e) => match mode {
                FailureMode::FailFast => {
                    return Err(CvekError::Replicate {
                        index: rep,
                        source: Box::new(e),
                    })
                }
                FailureMode::SkipErrors => {
                    pvalues.push(None);
                    failures.push(ReplicateFailure {
                        rep,
                        message: e.to_string(),
                    });
                }
            },
        }
    }
    let ok: Vec<f64> = pvalues.iter().flatten().copied().collect();
    Ok(ScenarioResult {
        scenario: s.clone(),
        rejection_rate: rejection_rate(&ok),
        pvalues,
        failures,
        wall_time: start.elapsed(),
    })
}

/// Runs scenarios in parallel; results come back in input order.
pub fn run_scenarios(scenarios: &[Scenario], mode: FailureMode) -> Result<Vec<ScenarioResult>> {
    scenarios.par_iter().map(|s| run_scenario(s, mode)).collect()
}

/// Data-generating mechanisms by name.
pub fn data_kernel(name: &str) -> Result<KernelSpec> {
    match name {
        "linear" => Ok(KernelSpec::polynomial(1)),
        "polynomial" => Ok(KernelSpec::polynomial(2)),
        "cubic" => Ok(KernelSpec::polynomial(3)),
        "rbf" => Ok(KernelSpec::rbf(1.0)),
        "matern32" => Ok(KernelSpec::matern(MaternNu::ThreeHalves, 1.0)),
        "matern52" => Ok(KernelSpec::matern(MaternNu::FiveHalves, 1.0)),
        _ => Err(CvekError::unknown("data kernel", name, DATA_KERNELS)),
    }
}

pub const DATA_KERNELS: &[&str] = &["linear", "polynomial", "cubic", "rbf", "matern32", "matern52"];
pub const LIBRARIES: &[&str] = &["poly", "rbf", "poly_rbf", "matern_rbf"];

/// Model libraries by name.
pub fn library(name: &str) -> Result<Vec<KernelSpec>> {
    let poly = || (1..=3).map(KernelSpec::polynomial).collect::<Vec<_>>();
    let rbf = || [0.6, 1.0, 2.0].map(KernelSpec::rbf).to_vec();
    match name {
        "poly" => Ok(poly()),
        "rbf" => Ok(rbf()),
        "poly_rbf" => Ok([poly(), rbf()].concat()),
        "matern_rbf" => {
            let matern = [MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves]
                .map(|nu| KernelSpec::matern(nu, 1.0))
                .to_vec();
            Ok([matern, rbf()].concat())
        }
        _ => Err(CvekError::unknown("library", name, LIBRARIES)),
    }
}

/// Which parts of the scenario grid to run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub data_kernels: Vec<String>,
    pub libraries: Vec<String>,
    /// User-defined libraries, looked up before the built-in names.
    pub custom_libraries: BTreeMap<String, Vec<KernelSpec>>,
    pub criteria: Vec<TuningCriterion>,
    pub strategies: Vec<EnsembleStrategy>,
    pub tests: Vec<TestKind>,
    pub deltas: Vec<f64>,
    pub n: usize,
    pub p1: usize,
    pub p2: usize,
    pub noise_sd: f64,
    pub interaction_scale: InteractionScale,
    pub beta: f64,
    pub grid: LambdaGrid,
    pub bootstrap_replicates: usize,
    pub reps: usize,
    pub master_seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            data_kernels: DATA_KERNELS.iter().map(|s| s.to_string()).collect(),
            libraries: LIBRARIES.iter().map(|s| s.to_string()).collect(),
            custom_libraries: BTreeMap::new(),
            criteria: TuningCriterion::ALL.to_vec(),
            strategies: EnsembleStrategy::ALL.to_vec(),
            tests: TestKind::ALL.to_vec(),
            deltas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            n: 100,
            p1: 2,
            p2: 2,
            noise_sd: 0.01,
            interaction_scale: InteractionScale::Unit,
            beta: 1.0,
            grid: LambdaGrid::default(),
            bootstrap_replicates: 100,
            reps: 200,
            master_seed: 0,
        }
    }
}

/// Cartesian product in the order data kernel, library, criterion, strategy, test, δ.
///
/// Every scenario shares the master seed, so replicate `r` sees the same
/// features, main effects and noise in every cell.
pub fn scenario_grid(config: &GridConfig) -> Result<Vec<Scenario>> {
    let kernels = config
        .data_kernels
        .iter()
        .map(|name| Ok((name.clone(), data_kernel(name)?)))
        .collect::<Result<Vec<_>>>()?;
    let libraries = config
        .libraries
        .iter()
        .map(|name| match config.custom_libraries.get(name) {
            Some(specs) if specs.is_empty() => Err(CvekError::InvalidArgument(format!("library `{name}` is empty"))),
            Some(specs) => Ok((name.clone(), specs.clone())),
            None => Ok((name.clone(), library(name)?)),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (data_name, k_true) in &kernels {
        for (library_name, lib) in &libraries {
            for &criterion in &config.criteria {
                for &strategy in &config.strategies {
                    for &test_kind in &config.tests {
                        for &delta in &config.deltas {
                            out.push(Scenario {
                                id: out.len(),
                                data_kernel: data_name.clone(),
                                k_true: *k_true,
                                delta,
                                noise_sd: config.noise_sd,
                                interaction_scale: config.interaction_scale,
                                n: config.n,
                                p1: config.p1,
                                p2: config.p2,
                                library_name: library_name.clone(),
                                library: lib.clone(),
                                criterion,
                                strategy,
                                test_kind,
                                beta: config.beta,
                                grid: config.grid.clone(),
                                replicates_b: config.bootstrap_replicates,
                                reps: config.reps,
                                master_seed: config.master_seed,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Kolmogorov–Smirnov distance between the empirical CDF of `values` and U(0, 1).
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            let above = (i + 1) as f64 / n - v;
            let below = v - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn main_effects_have_unit_norm() {
        let d = generate_data(40, 2, 3, &KernelSpec::rbf(1.0), 0.5, 0.01, 9).unwrap();
        assert!((d.h1.norm() - 1.0).abs() < 1e-12);
        assert!((d.h2.norm() - 1.0).abs() < 1e-12);
        assert!((d.h12.norm() - 1.0).abs() < 1e-12);
        let product = d.h1.component_mul(&d.h2);
        assert!((&d.h12 * product.norm() - product).amax() < 1e-15);
        assert_eq!(d.x1.ncols(), 2);
        assert_eq!(d.x2.ncols(), 3);
    }

    #[test]
    fn delta_enters_linearly_with_shared_seed() {
        let k = KernelSpec::matern(MaternNu::FiveHalves, 1.0);
        let a = generate_data(30, 2, 2, &k, 0.0, 0.01, 4).unwrap();
        let b = generate_data(30, 2, 2, &k, 0.5, 0.01, 4).unwrap();
        let diff = &b.y - &a.y;
        let expected = &a.h12 * 0.5;
        assert!((diff - expected).amax() < 1e-15);
    }

    #[test]
    fn product_scale_keeps_raw_product() {
        let k = KernelSpec::rbf(1.0);
        let d = generate_data_scaled(30, 2, 2, &k, 1.0, 0.0, 5, InteractionScale::Product).unwrap();
        assert!((&d.h12 - d.h1.component_mul(&d.h2)).amax() < 1e-16);
        assert!((&d.y - (&d.h1 + &d.h2 + &d.h12)).amax() < 1e-15);
        let u = generate_data(30, 2, 2, &k, 1.0, 0.0, 5).unwrap();
        assert_eq!(u.h1, d.h1);
    }

    #[test]
    fn generation_is_deterministic() {
        let k = KernelSpec::polynomial(2);
        let a = generate_data(25, 2, 2, &k, 0.3, 0.01, 77).unwrap();
        let b = generate_data(25, 2, 2, &k, 0.3, 0.01, 77).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.x1, b.x1);
        let c = generate_data(25, 2, 2, &k, 0.3, 0.01, 78).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn invalid_dimensions_rejected() {
        assert!(generate_data(1, 2, 2, &KernelSpec::rbf(1.0), 0.0, 0.01, 0).is_err());
        assert!(generate_data(10, 0, 2, &KernelSpec::rbf(1.0), 0.0, 0.01, 0).is_err());
    }

    #[test]
    fn full_grid_size() {
        let all = scenario_grid(&GridConfig::default()).unwrap();
        assert_eq!(all.len(), 6 * 4 * 7 * 3 * 2 * 6);
        assert!(all.iter().enumerate().all(|(i, s)| s.id == i));
    }

    #[test]
    fn fixed_library_and_test_gives_full_cell_count() {
        let cfg = GridConfig {
            libraries: vec!["rbf".into()],
            tests: vec![TestKind::Boot],
            deltas: vec![0.0],
            ..GridConfig::default()
        };
        assert_eq!(scenario_grid(&cfg).unwrap().len(), 126);
    }

    #[test]
    fn single_cell_selection() {
        let cfg = GridConfig {
            data_kernels: vec!["rbf".into()],
            libraries: vec!["rbf".into()],
            criteria: vec![TuningCriterion::Loocv],
            strategies: vec![EnsembleStrategy::Stack],
            tests: vec![TestKind::Boot],
            deltas: vec![0.0],
            ..GridConfig::default()
        };
        let grid = scenario_grid(&cfg).unwrap();
        assert_eq!(grid.len(), 1);
        assert_eq!(
            grid[0].library,
            vec![KernelSpec::rbf(0.6), KernelSpec::rbf(1.0), KernelSpec::rbf(2.0)]
        );
    }

    #[test]
    fn custom_library_resolves_first() {
        let mut custom = BTreeMap::new();
        custom.insert("rbf".to_string(), vec![KernelSpec::rbf(0.3)]);
        custom.insert("mine".to_string(), vec![KernelSpec::linear(), KernelSpec::rbf(1.0)]);
        let cfg = GridConfig {
            data_kernels: vec!["rbf".into()],
            libraries: vec!["rbf".into(), "mine".into(), "poly".into()],
            custom_libraries: custom,
            deltas: vec![0.0],
            criteria: vec![TuningCriterion::Loocv],
            strategies: vec![EnsembleStrategy::Stack],
            tests: vec![TestKind::Boot],
            ..GridConfig::default()
        };
        let grid = scenario_grid(&cfg).unwrap();
        assert_eq!(grid[0].library, vec![KernelSpec::rbf(0.3)]);
        assert_eq!(grid[1].library.len(), 2);
        assert_eq!(grid[2].library.len(), 3);
    }

    #[test]
    fn unknown_names_rejected() {
        let cfg = GridConfig {
            libraries: vec!["splines".into()],
            ..GridConfig::default()
        };
        assert!(matches!(scenario_grid(&cfg), Err(CvekError::UnknownName { .. })));
        assert!(data_kernel("quartic").is_err());
    }

    #[test]
    fn ks_examples() {
        assert!((ks_uniform(&[0.5]) - 0.5).abs() < 1e-15);
        let even: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&even) - 0.005).abs() < 1e-12);
        assert!((ks_uniform(&[0.0; 10]) - 1.0).abs() < 1e-15);
    }

    fn tiny_scenario(reps: usize) -> Scenario {
        let cfg = GridConfig {
            data_kernels: vec!["rbf".into()],
            libraries: vec!["rbf".into()],
            criteria: vec![TuningCriterion::Loocv],
            strategies: vec![EnsembleStrategy::Stack],
            tests: vec![TestKind::Boot],
            deltas: vec![0.0],
            n: 30,
            reps,
            bootstrap_replicates: 20,
            ..GridConfig::default()
        };
        scenario_grid(&cfg).unwrap().remove(0)
    }

    #[test]
    fn single_replicate_rate_is_binary() {
        let r = run_scenario(&tiny_scenario(1), FailureMode::FailFast).unwrap();
        assert!(r.rejection_rate == 0.0 || r.rejection_rate == 1.0);
    }

    #[test]
    fn scenario_is_deterministic_and_order_free() {
        let s = tiny_scenario(6);
        let a = run_scenario(&s, FailureMode::FailFast).unwrap();
        let b = run_scenario(&s, FailureMode::FailFast).unwrap();
        assert_eq!(a.pvalues, b.pvalues);
        let reversed: Vec<f64> = (0..6).rev().map(|r| run_replicate(&s, r).unwrap()).collect();
        let forward: Vec<f64> = a.pvalues.iter().rev().map(|p| p.unwrap()).collect();
        assert_eq!(reversed, forward);
        let ok: Vec<f64> = a.pvalues.iter().flatten().copied().collect();
        assert_eq!(a.rejection_rate, rejection_rate(&ok));
    }

    #[test]
    fn invalid_scenario_rejected() {
        let mut s = tiny_scenario(1);
        s.n = 3;
        assert!(run_scenario(&s, FailureMode::FailFast).is_err());
        let mut s = tiny_scenario(1);
        s.reps = 0;
        assert!(run_scenario(&s, FailureMode::FailFast).is_err());
    }
}
