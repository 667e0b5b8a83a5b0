//! Cross-validated kernel ensembles and a variance-component test for
//! nonlinear interactions between two groups of features.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod estimator;
pub mod hypothesis;
pub mod kernel;
pub mod rng;
pub mod simulation;
pub mod tuning;

pub use ensemble::{EnsembleStrategy, WeightVector};
pub use error::{CvekError, ErrorKind, Result};
pub use estimator::{fit_cvek, CvekOptions, EnsembleFit};
pub use hypothesis::{
    fit_additive, run_test, BootstrapOptions, BootstrapRule, InteractionKernel, ReplicateFit, TestKind, TestOptions,
    TestResult,
};
pub use kernel::{FeatureMatrix, GramMatrix, KernelFamily, KernelSpec, MaternNu};
pub use simulation::{FailureMode, GridConfig, Scenario, ScenarioResult};
pub use tuning::{LambdaGrid, TuningCriterion};
