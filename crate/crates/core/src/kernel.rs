//! Kernel families, Gram matrices and feature standardization.
//!
//! Every family is a pure function of two equal-length input vectors. Gram
//! matrices are evaluated on the upper triangle and mirrored, so they are
//! exactly symmetric. The stationary families (rbf, Matérn, rational) depend
//! on the Euclidean distance `r = |x - x'|` only.

use std::f64::consts::FRAC_2_PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CvekError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Intercept,
    Linear,
    Polynomial,
    Rbf,
    Matern,
    Rational,
    Nn,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 7] = [
        KernelFamily::Intercept,
        KernelFamily::Linear,
        KernelFamily::Polynomial,
        KernelFamily::Rbf,
        KernelFamily::Matern,
        KernelFamily::Rational,
        KernelFamily::Nn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Intercept => "intercept",
            KernelFamily::Linear => "linear",
            KernelFamily::Polynomial => "polynomial",
            KernelFamily::Rbf => "rbf",
            KernelFamily::Matern => "matern",
            KernelFamily::Rational => "rational",
            KernelFamily::Nn => "nn",
        }
    }

    /// Hyperparameters the family actually reads.
    pub fn required_params(self) -> &'static [&'static str] {
        match self {
            KernelFamily::Intercept | KernelFamily::Linear | KernelFamily::Nn => &[],
            KernelFamily::Polynomial => &["p"],
            KernelFamily::Rbf => &["l"],
            KernelFamily::Matern => &["l", "nu"],
            KernelFamily::Rational => &["l", "alpha"],
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            KernelFamily::Intercept => "k(x, x') = 1",
            KernelFamily::Linear => "k(x, x') = <x, x'>",
            KernelFamily::Polynomial => "k(x, x') = (1 + <x, x'>)^p",
            KernelFamily::Rbf => "k(x, x') = exp(-|x - x'|^2 / (2 l^2))",
            KernelFamily::Matern => "k(x, x') = Matern closed form, nu in {1/2, 3/2, 5/2}",
            KernelFamily::Rational => "k(x, x') = (1 + |x - x'|^2 / (2 alpha l^2))^(-alpha)",
            KernelFamily::Nn => "k(x, x') = (2/pi) asin(2 x~'x~' / sqrt((1 + 2 x~'x~)(1 + 2 x~''x~')))",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = CvekError;

    fn from_str(s: &str) -> Result<Self> {
        KernelFamily::ALL
            .into_iter()
            .find(|f| f.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<&str> = KernelFamily::ALL.iter().map(|f| f.name()).collect();
                CvekError::unknown("kernel family", s, &names)
            })
    }
}

/// Matérn smoothness. Only the half-integer orders with closed forms are supported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternNu {
    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }
}

impl From<MaternNu> for f64 {
    fn from(nu: MaternNu) -> f64 {
        nu.value()
    }
}

impl TryFrom<f64> for MaternNu {
    type Error = CvekError;

    fn try_from(v: f64) -> Result<Self> {
        match v {
            0.5 => Ok(MaternNu::Half),
            1.5 => Ok(MaternNu::ThreeHalves),
            2.5 => Ok(MaternNu::FiveHalves),
            _ => Err(CvekError::InvalidHyperparameter {
                family: "matern",
                field: "nu",
                value: v,
            }),
        }
    }
}

impl FromStr for MaternNu {
    type Err = CvekError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/2" => Ok(MaternNu::Half),
            "3/2" => Ok(MaternNu::ThreeHalves),
            "5/2" => Ok(MaternNu::FiveHalves),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| CvekError::unknown("matern nu", other, &["1/2", "3/2", "5/2", "0.5", "1.5", "2.5"]))?;
                MaternNu::try_from(v)
            }
        }
    }
}

/// One kernel family with its hyperparameters.
///
/// Fields a family does not use are ignored rather than rejected.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default = "default_length_scale")]
    pub l: f64,
    #[serde(default = "default_degree")]
    pub p: u32,
    #[serde(default = "default_nu")]
    pub nu: MaternNu,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_length_scale() -> f64 {
    1.0
}
fn default_degree() -> u32 {
    2
}
fn default_nu() -> MaternNu {
    MaternNu::ThreeHalves
}
fn default_alpha() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Self {
        KernelSpec {
            family,
            l: default_length_scale(),
            p: default_degree(),
            nu: default_nu(),
            alpha: default_alpha(),
        }
    }

    pub fn intercept() -> Self {
        Self::new(KernelFamily::Intercept)
    }

    pub fn linear() -> Self {
        Self::new(KernelFamily::Linear)
    }

    pub fn polynomial(p: u32) -> Self {
        KernelSpec {
            p,
            ..Self::new(KernelFamily::Polynomial)
        }
    }

    pub fn rbf(l: f64) -> Self {
        KernelSpec {
            l,
            ..Self::new(KernelFamily::Rbf)
        }
    }

    pub fn matern(nu: MaternNu, l: f64) -> Self {
        KernelSpec {
            l,
            nu,
            ..Self::new(KernelFamily::Matern)
        }
    }

    pub fn rational(alpha: f64, l: f64) -> Self {
        KernelSpec {
            l,
            alpha,
            ..Self::new(KernelFamily::Rational)
        }
    }

    pub fn nn() -> Self {
        Self::new(KernelFamily::Nn)
    }

    pub fn validate(&self) -> Result<()> {
        let name = self.family.name();
        let positive = |field: &'static str, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(CvekError::InvalidHyperparameter {
                    family: name,
                    field,
                    value,
                })
            }
        };
        match self.family {
            KernelFamily::Rbf | KernelFamily::Matern => positive("l", self.l),
            KernelFamily::Rational => {
                positive("l", self.l)?;
                positive("alpha", self.alpha)
            }
            _ => Ok(()),
        }
    }

    /// Evaluates `k(x, x2)`.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        if x.len() != x2.len() {
            return Err(CvekError::DimensionMismatch {
                context: "kernel evaluation",
                expected: x.len(),
                found: x2.len(),
            });
        }
        self.validate()?;
        Ok(self.eval_unchecked(x, x2))
    }

    fn eval_unchecked(&self, x: &[f64], x2: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Intercept => 1.0,
            KernelFamily::Linear => dot(x, x2),
            KernelFamily::Polynomial => (1.0 + dot(x, x2)).powi(self.p as i32),
            KernelFamily::Rbf => (-sq_dist(x, x2) / (2.0 * self.l * self.l)).exp(),
            KernelFamily::Matern => {
                let r = sq_dist(x, x2).sqrt() / self.l;
                match self.nu {
                    MaternNu::Half => (-r).exp(),
                    MaternNu::ThreeHalves => {
                        let s = 3f64.sqrt() * r;
                        (1.0 + s) * (-s).exp()
                    }
                    MaternNu::FiveHalves => {
                        let s = 5f64.sqrt() * r;
                        (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
                    }
                }
            }
            KernelFamily::Rational => {
                let z = sq_dist(x, x2) / (2.0 * self.alpha * self.l * self.l);
                // (1 + z)^(-alpha) through ln_1p keeps the large-alpha limit accurate.
                (-self.alpha * z.ln_1p()).exp()
            }
            KernelFamily::Nn => {
                // Augmented inputs (1, x): inner products pick up a leading 1.
                let cross = 1.0 + dot(x, x2);
                let self_x = 1.0 + dot(x, x);
                let self_x2 = 1.0 + dot(x2, x2);
                let arg = 2.0 * cross / ((1.0 + 2.0 * self_x) * (1.0 + 2.0 * self_x2)).sqrt();
                FRAC_2_PI * arg.clamp(-1.0, 1.0).asin()
            }
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            KernelFamily::Intercept | KernelFamily::Linear | KernelFamily::Nn => {
                write!(f, "{}", self.family)
            }
            KernelFamily::Polynomial => write!(f, "polynomial:p={}", self.p),
            KernelFamily::Rbf => write!(f, "rbf:l={}", self.l),
            KernelFamily::Matern => write!(f, "matern:nu={}:l={}", self.nu.value(), self.l),
            KernelFamily::Rational => write!(f, "rational:alpha={}:l={}", self.alpha, self.l),
        }
    }
}

/// Parses `family[:key=value]...`, e.g. `rbf:l=0.5` or `matern:nu=3/2:l=1`.
impl FromStr for KernelSpec {
    type Err = CvekError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let family: KernelFamily = parts.next().unwrap_or_default().parse()?;
        let mut spec = KernelSpec::new(family);
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                CvekError::InvalidArgument(format!("expected key=value in kernel spec `{s}`, got `{part}`"))
            })?;
            let bad = || CvekError::InvalidArgument(format!("bad value `{value}` for `{key}` in kernel spec `{s}`"));
            match key.trim() {
                "l" => spec.l = value.trim().parse().map_err(|_| bad())?,
                "p" => spec.p = value.trim().parse().map_err(|_| bad())?,
                "alpha" => spec.alpha = value.trim().parse().map_err(|_| bad())?,
                "nu" => spec.nu = value.parse()?,
                other => {
                    return Err(CvekError::unknown(
                        "kernel hyperparameter",
                        other,
                        &["l", "p", "nu", "alpha"],
                    ))
                }
            }
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// n×p feature block with column names.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub standardized: bool,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, column_names: Vec<String>) -> Result<Self> {
        if column_names.len() != values.ncols() {
            return Err(CvekError::DimensionMismatch {
                context: "feature column names",
                expected: values.ncols(),
                found: column_names.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CvekError::NonFinite("feature matrix"));
        }
        Ok(FeatureMatrix {
            values,
            column_names,
            standardized: false,
        })
    }

    /// Unnamed columns get `x1`, `x2`, ...
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        let names = (1..=values.ncols()).map(|j| format!("x{j}")).collect();
        Self::new(values, names)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn standardize(&self) -> Result<FeatureMatrix> {
        let mut out = standardize(&self.values)?;
        out.column_names.clone_from(&self.column_names);
        Ok(out)
    }
}

/// Centers each column and scales it to unit sample standard deviation (divisor n - 1).
pub fn standardize(raw: &DMatrix<f64>) -> Result<FeatureMatrix> {
    let n = raw.nrows();
    if n < 2 {
        return Err(CvekError::TooFewRows { required: 2, found: n });
    }
    let mut fm = FeatureMatrix::from_matrix(raw.clone())?;
    for (j, mut col) in fm.values.column_iter_mut().enumerate() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / (n - 1) as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(CvekError::ConstantColumn {
                column: format!("x{}", j + 1),
            });
        }
        col /= sd;
    }
    fm.standardized = true;
    Ok(fm)
}

/// Where a Gram matrix came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GramSource {
    /// A single kernel evaluated on one feature block.
    Kernel(KernelSpec),
    /// Sum of main-effect Gram matrices of two blocks under the same kernel.
    Additive(KernelSpec),
    /// Hadamard product of main-effect Gram matrices.
    Interaction(Option<KernelSpec>),
    /// Ensemble kernel reconstructed from an ensemble smoother.
    Ensemble,
    /// Supplied directly by the caller.
    Supplied,
}

impl GramSource {
    pub fn spec(&self) -> Option<KernelSpec> {
        match *self {
            GramSource::Kernel(s) | GramSource::Additive(s) => Some(s),
            GramSource::Interaction(s) => s,
            GramSource::Ensemble | GramSource::Supplied => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub source: GramSource,
    pub trace_normalized: bool,
}

impl GramMatrix {
    /// Wraps a caller-supplied square matrix.
    pub fn from_matrix(values: DMatrix<f64>, source: GramSource) -> Result<Self> {
        if !values.is_square() {
            return Err(CvekError::DimensionMismatch {
                context: "gram matrix must be square",
                expected: values.nrows(),
                found: values.ncols(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CvekError::NonFinite("gram matrix"));
        }
        Ok(GramMatrix {
            values,
            source,
            trace_normalized: false,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.amax()
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let tol = rel_tol * self.max_abs();
        let n = self.n();
        (0..n).all(|i| (i + 1..n).all(|j| (self.values[(i, j)] - self.values[(j, i)]).abs() <= tol))
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.values.clone()).eigenvalues.min()
    }

    /// `min eigenvalue >= -tol * |trace|`.
    pub fn is_psd(&self, tol: f64) -> bool {
        self.min_eigenvalue() >= -tol * self.trace().abs()
    }
}

/// `K[i, j] = k(x_i, x_j)` over the rows of `x`.
pub fn gram_matrix(spec: &KernelSpec, x: &FeatureMatrix) -> Result<GramMatrix> {
    spec.validate()?;
    let n = x.nrows();
    if n == 0 {
        return Err(CvekError::TooFewRows { required: 1, found: 0 });
    }
    let rows = x.rows();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = spec.eval_unchecked(&rows[i], &rows[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(GramMatrix {
        values: k,
        source: GramSource::Kernel(*spec),
        trace_normalized: false,
    })
}

pub fn normalize_trace(k: &GramMatrix) -> Result<GramMatrix> {
    let trace = k.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(CvekError::DegenerateKernel { trace });
    }
    Ok(GramMatrix {
        values: &k.values / trace,
        source: k.source,
        trace_normalized: true,
    })
}

/// Elementwise product `K1 ∘ K2`, the Gram matrix of the product kernel `k1 * k2`.
pub fn interaction_gram(k1: &GramMatrix, k2: &GramMatrix) -> Result<GramMatrix> {
    if k1.n() != k2.n() {
        return Err(CvekError::DimensionMismatch {
            context: "interaction gram",
            expected: k1.n(),
            found: k2.n(),
        });
    }
    let spec = match (k1.source.spec(), k2.source.spec()) {
        (Some(a), Some(b)) if a == b => Some(a),
        _ => None,
    };
    Ok(GramMatrix {
        values: k1.values.component_mul(&k2.values),
        source: GramSource::Interaction(spec),
        trace_normalized: false,
    })
}

/// `K1 + K2`, the Gram matrix of the additive kernel `k1 + k2`.
pub fn additive_gram(k1: &GramMatrix, k2: &GramMatrix) -> Result<GramMatrix> {
    if k1.n() != k2.n() {
        return Err(CvekError::DimensionMismatch {
            context: "additive gram",
            expected: k1.n(),
            found: k2.n(),
        });
    }
    let source = match (k1.source.spec(), k2.source.spec()) {
        (Some(a), Some(b)) if a == b => GramSource::Additive(a),
        _ => GramSource::Supplied,
    };
    Ok(GramMatrix {
        values: &k1.values + &k2.values,
        source,
        trace_normalized: false,
    })
}

/// The pair of main-effect Gram matrices and their sum for one library kernel.
#[derive(Clone, Debug)]
pub struct BlockGrams {
    pub first: GramMatrix,
    pub second: GramMatrix,
    pub additive: GramMatrix,
}

/// Builds trace-normalized `K1`, `K2` and the trace-normalized additive kernel
/// `normalize(K1 + K2)` for two feature blocks.
pub fn block_grams(spec: &KernelSpec, x1: &FeatureMatrix, x2: &FeatureMatrix) -> Result<BlockGrams> {
    if x1.nrows() != x2.nrows() {
        return Err(CvekError::DimensionMismatch {
            context: "feature blocks",
            expected: x1.nrows(),
            found: x2.nrows(),
        });
    }
    let first = normalize_trace(&gram_matrix(spec, x1)?)?;
    let second = normalize_trace(&gram_matrix(spec, x2)?)?;
    let additive = normalize_trace(&additive_gram(&first, &second)?)?;
    Ok(BlockGrams {
        first,
        second,
        additive,
    })
}

/// The seven families with representative settings, mainly for tests and listings.
pub fn catalog() -> Vec<KernelSpec> {
    vec![
        KernelSpec::intercept(),
        KernelSpec::linear(),
        KernelSpec::polynomial(2),
        KernelSpec::rbf(1.0),
        KernelSpec::matern(MaternNu::ThreeHalves, 1.0),
        KernelSpec::rational(2.0, 1.0),
        KernelSpec::nn(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn intercept_is_one() {
        let k = KernelSpec::intercept();
        assert_eq!(k.eval(&[0.3, -1.2], &[5.0, 5.0]).unwrap(), 1.0);
    }

    #[test]
    fn rbf_at_zero_distance_is_one() {
        let k = KernelSpec::rbf(1.0);
        assert_eq!(k.eval(&[0.7, -3.1, 2.0], &[0.7, -3.1, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn polynomial_degree_zero_is_one() {
        let k = KernelSpec::polynomial(0);
        assert_eq!(k.eval(&[4.0, 1.0], &[-9.0, 2.5]).unwrap(), 1.0);
    }

    #[test]
    fn linear_is_dot_product() {
        assert_eq!(KernelSpec::linear().eval(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
    }

    #[test]
    fn polynomial_degree_one_is_shifted_linear() {
        // (1 + <x, x'>)^1 is the linear kernel plus one, not the linear kernel itself.
        let v = KernelSpec::polynomial(1).eval(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(v, 12.0);
    }

    #[test]
    fn matern_at_zero_distance_is_one() {
        for nu in [MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves] {
            let k = KernelSpec::matern(nu, 0.8);
            assert_eq!(k.eval(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        }
    }

    #[test]
    fn rbf_hand_value() {
        // |x - x'|^2 = 2, l = 1  ->  exp(-1)
        let v = KernelSpec::rbf(1.0).eval(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!(close(v, (-1.0f64).exp(), 1e-15));
    }

    #[test]
    fn matern_hand_values() {
        let r = 0.7f64;
        let l = 1.3f64;
        let s3 = 3f64.sqrt() * r / l;
        let s5 = 5f64.sqrt() * r / l;
        let v32 = KernelSpec::matern(MaternNu::ThreeHalves, l).eval(&[0.0], &[r]).unwrap();
        let v52 = KernelSpec::matern(MaternNu::FiveHalves, l).eval(&[0.0], &[r]).unwrap();
        let v12 = KernelSpec::matern(MaternNu::Half, l).eval(&[0.0], &[r]).unwrap();
        assert!(close(v32, (1.0 + s3) * (-s3).exp(), 1e-15));
        assert!(close(
            v52,
            (1.0 + s5 + 5.0 * r * r / (3.0 * l * l)) * (-s5).exp(),
            1e-15
        ));
        assert!(close(v12, (-r / l).exp(), 1e-15));
    }

    #[test]
    fn nn_hand_value() {
        // x = (1), x' = (0): augmented (1,1), (1,0); cross = 1, self = 2, 1
        let v = KernelSpec::nn().eval(&[1.0], &[0.0]).unwrap();
        let expected = FRAC_2_PI * (2.0 / (5.0f64 * 3.0).sqrt()).asin();
        assert!(close(v, expected, 1e-15));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = KernelSpec::rbf(1.0).eval(&[1.0], &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, CvekError::DimensionMismatch { .. }));
    }

    #[test]
    fn invalid_hyperparameter_names_field() {
        let err = KernelSpec::rbf(0.0).eval(&[1.0], &[1.0]).unwrap_err();
        assert!(matches!(err, CvekError::InvalidHyperparameter { field: "l", .. }));
        let err = KernelSpec::rational(-1.0, 1.0).eval(&[1.0], &[1.0]).unwrap_err();
        assert!(matches!(err, CvekError::InvalidHyperparameter { field: "alpha", .. }));
        // irrelevant hyperparameters are ignored
        let spec = KernelSpec {
            l: -5.0,
            ..KernelSpec::polynomial(2)
        };
        assert!(spec.eval(&[1.0], &[2.0]).is_ok());
    }

    #[test]
    fn spec_parsing_round_trips_display() {
        for spec in catalog() {
            let parsed: KernelSpec = spec.to_string().parse().unwrap();
            assert_eq!(parsed, spec);
        }
        let m: KernelSpec = "matern:nu=5/2:l=1.5".parse().unwrap();
        assert_eq!(m, KernelSpec::matern(MaternNu::FiveHalves, 1.5));
        assert!("matern:nu=2".parse::<KernelSpec>().is_err());
        assert!("gaussian".parse::<KernelSpec>().is_err());
    }

    fn fm(rows: &[&[f64]]) -> FeatureMatrix {
        let n = rows.len();
        let p = rows[0].len();
        FeatureMatrix::from_matrix(DMatrix::from_fn(n, p, |i, j| rows[i][j])).unwrap()
    }

    #[test]
    fn intercept_gram_is_all_ones() {
        let x = fm(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 0.5]]);
        let k = gram_matrix(&KernelSpec::intercept(), &x).unwrap();
        assert_eq!(k.values, DMatrix::from_element(3, 3, 1.0));
    }

    #[test]
    fn linear_gram_of_orthonormal_rows_is_identity() {
        let x = fm(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let k = gram_matrix(&KernelSpec::linear(), &x).unwrap();
        assert_eq!(k.values, DMatrix::identity(2, 2));
    }

    #[test]
    fn empty_features_rejected() {
        let x = FeatureMatrix::from_matrix(DMatrix::zeros(0, 2)).unwrap();
        assert!(gram_matrix(&KernelSpec::linear(), &x).is_err());
    }

    #[test]
    fn normalize_trace_examples() {
        let k = GramMatrix::from_matrix(DMatrix::identity(2, 2), GramSource::Supplied).unwrap();
        let nk = normalize_trace(&k).unwrap();
        assert_eq!(nk.values, DMatrix::identity(2, 2) * 0.5);
        assert!(nk.trace_normalized);

        let ones = GramMatrix::from_matrix(DMatrix::from_element(4, 4, 1.0), GramSource::Supplied).unwrap();
        assert_eq!(
            normalize_trace(&ones).unwrap().values,
            DMatrix::from_element(4, 4, 0.25)
        );

        let twice = normalize_trace(&normalize_trace(&ones).unwrap()).unwrap();
        assert_eq!(twice.values, normalize_trace(&ones).unwrap().values);

        let zero = GramMatrix::from_matrix(DMatrix::zeros(3, 3), GramSource::Supplied).unwrap();
        assert!(matches!(
            normalize_trace(&zero),
            Err(CvekError::DegenerateKernel { .. })
        ));
    }

    #[test]
    fn interaction_gram_examples() {
        let ones = GramMatrix::from_matrix(DMatrix::from_element(3, 3, 1.0), GramSource::Supplied).unwrap();
        let k2 = GramMatrix::from_matrix(
            DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.3, 0.1, 0.3, 4.0]),
            GramSource::Supplied,
        )
        .unwrap();
        assert_eq!(interaction_gram(&ones, &k2).unwrap().values, k2.values);

        let id = GramMatrix::from_matrix(DMatrix::identity(3, 3), GramSource::Supplied).unwrap();
        assert_eq!(interaction_gram(&id, &id).unwrap().values, DMatrix::identity(3, 3));

        let small = GramMatrix::from_matrix(DMatrix::identity(2, 2), GramSource::Supplied).unwrap();
        assert!(interaction_gram(&id, &small).is_err());
    }

    #[test]
    fn standardize_hand_example() {
        let raw = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let s = standardize(&raw).unwrap();
        // mean 2, sample sd 1
        assert_eq!(s.values.as_slice(), &[-1.0, 0.0, 1.0]);
        assert!(s.standardized);
    }

    #[test]
    fn standardize_is_idempotent() {
        let raw = DMatrix::from_row_slice(5, 2, &[1.0, 7.0, 2.5, -3.0, 0.2, 4.4, 9.0, 1.0, -2.0, 0.0]);
        let once = standardize(&raw).unwrap();
        let twice = standardize(&once.values).unwrap();
        assert!((&once.values - &twice.values).amax() <= 1e-12);
        for col in once.values.column_iter() {
            assert!(col.sum().abs() <= 1e-10 * 5.0);
        }
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let raw = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let err = standardize(&raw).unwrap_err();
        assert!(matches!(err, CvekError::ConstantColumn { ref column } if column == "x2"));
        assert!(standardize(&DMatrix::from_element(1, 1, 1.0)).is_err());
    }

    #[test]
    fn matern_decreases_with_distance() {
        for nu in [MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves] {
            let k = KernelSpec::matern(nu, 1.0);
            let vals: Vec<f64> = (0..200).map(|i| k.eval(&[0.0], &[i as f64 * 0.05]).unwrap()).collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0]), "{nu:?}");
        }
    }

    #[test]
    fn rational_approaches_rbf() {
        let rq = KernelSpec::rational(1e6, 0.9);
        let rbf = KernelSpec::rbf(0.9);
        let x = [0.3, -1.1];
        let x2 = [1.4, 0.2];
        assert!((rq.eval(&x, &x2).unwrap() - rbf.eval(&x, &x2).unwrap()).abs() < 1e-5);
    }

    fn any_spec() -> impl Strategy<Value = KernelSpec> {
        prop_oneof![
            Just(KernelSpec::intercept()),
            Just(KernelSpec::linear()),
            (0u32..4).prop_map(KernelSpec::polynomial),
            (0.2f64..3.0).prop_map(KernelSpec::rbf),
            (0.2f64..3.0, 0usize..3).prop_map(|(l, k)| {
                KernelSpec::matern([MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves][k], l)
            }),
            (0.2f64..3.0, 0.1f64..10.0).prop_map(|(l, a)| KernelSpec::rational(a, l)),
            Just(KernelSpec::nn()),
        ]
    }

    proptest! {
        #[test]
        fn eval_is_exactly_symmetric(
            spec in any_spec(),
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            x2 in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            prop_assert_eq!(spec.eval(&x, &x2).unwrap(), spec.eval(&x2, &x).unwrap());
        }

        #[test]
        fn nn_lies_in_unit_interval(
            x in proptest::collection::vec(-50.0f64..50.0, 2),
            x2 in proptest::collection::vec(-50.0f64..50.0, 2),
        ) {
            let v = KernelSpec::nn().eval(&x, &x2).unwrap();
            prop_assert!((-1.0..=1.0).contains(&v));
        }

        #[test]
        fn gram_is_psd(spec in any_spec(), data in proptest::collection::vec(-2.0f64..2.0, 24)) {
            let x = FeatureMatrix::from_matrix(DMatrix::from_row_slice(12, 2, &data)).unwrap();
            let k = gram_matrix(&spec, &x).unwrap();
            prop_assert!(k.is_symmetric(0.0));
            prop_assert!(k.is_psd(1e-8));
        }

        #[test]
        fn hadamard_of_psd_is_psd(a in proptest::collection::vec(-2.0f64..2.0, 20), b in proptest::collection::vec(-2.0f64..2.0, 20)) {
            let x1 = FeatureMatrix::from_matrix(DMatrix::from_row_slice(10, 2, &a)).unwrap();
            let x2 = FeatureMatrix::from_matrix(DMatrix::from_row_slice(10, 2, &b)).unwrap();
            let k1 = gram_matrix(&KernelSpec::rbf(1.0), &x1).unwrap();
            let k2 = gram_matrix(&KernelSpec::polynomial(2), &x2).unwrap();
            prop_assert!(interaction_gram(&k1, &k2).unwrap().is_psd(1e-8));
        }
    }
}
