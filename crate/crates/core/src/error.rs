use thiserror::Error;

/// Broad failure category, used by front-ends to choose an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, unknown names, inconsistent configuration.
    Usage,
    /// Input data that cannot be used as given.
    Data,
    /// A numerical routine failed or the model degenerated.
    Numerical,
}

#[derive(Debug, Error)]
pub enum CvekError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid hyperparameter `{field}` = {value} for {family} kernel")]
    InvalidHyperparameter {
        family: &'static str,
        field: &'static str,
        value: f64,
    },

    #[error("degenerate kernel matrix: trace {trace} is not positive")]
    DegenerateKernel { trace: f64 },

    #[error("column `{column}` is constant and cannot be standardized")]
    ConstantColumn { column: String },

    #[error("need at least {required} rows, got {found}")]
    TooFewRows { required: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid lambda grid: {0}")]
    InvalidGrid(String),

    #[error("no admissible lambda: every grid value gives a non-finite {criterion} objective")]
    NoAdmissibleLambda { criterion: &'static str },

    #[error("singular ridge system at lambda = {lambda}")]
    SingularSystem { lambda: f64 },

    #[error("saturated model: n = {n} does not exceed tr(A) = {trace}")]
    SaturatedModel { n: usize, trace: f64 },

    #[error("invalid smoother matrix: eigenvalue {eigenvalue} exceeds 1")]
    InvalidSmoother { eigenvalue: f64 },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("degenerate null model: mean {mean}, efficient information {information}")]
    DegenerateNull { mean: f64, information: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown {kind} `{name}` (expected one of: {expected})")]
    UnknownName {
        kind: &'static str,
        name: String,
        expected: String,
    },

    #[error("replicate {index} failed: {source}")]
    Replicate {
        index: usize,
        #[source]
        source: Box<CvekError>,
    },
}

impl CvekError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CvekError::InvalidHyperparameter { .. }
            | CvekError::InvalidGrid(_)
            | CvekError::InvalidArgument(_)
            | CvekError::UnknownName { .. } => ErrorKind::Usage,
            CvekError::DimensionMismatch { .. } | CvekError::ConstantColumn { .. } | CvekError::TooFewRows { .. } => {
                ErrorKind::Data
            }
            CvekError::Replicate { source, .. } => source.kind(),
            _ => ErrorKind::Numerical,
        }
    }

    pub(crate) fn unknown(kind: &'static str, name: &str, expected: &[&str]) -> Self {
        CvekError::UnknownName {
            kind,
            name: name.to_string(),
            expected: expected.join(", "),
        }
    }
}

pub type Result<T, E = CvekError> = std::result::Result<T, E>;
