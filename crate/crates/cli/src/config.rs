//! Command-line flags merged over an optional TOML config file.
//!
//! Precedence is flags, then the config file, then built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cvek::hypothesis::{BootstrapOptions, ReplicateFit};
use cvek::simulation::{self, GridConfig, InteractionScale};
use cvek::{
    BootstrapRule, CvekOptions, EnsembleStrategy, InteractionKernel, KernelSpec, LambdaGrid, TestKind, TestOptions,
    TuningCriterion,
};
use serde::Deserialize;

use crate::error::{CliError, Result};
use crate::output::Format;

/// A library given either by name or as a list of kernel specs.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum LibraryValue {
    Name(String),
    Specs(Vec<String>),
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub data_kernels: Option<Vec<String>>,
    pub libraries: Option<Vec<String>>,
    pub criteria: Option<Vec<TuningCriterion>>,
    pub strategies: Option<Vec<EnsembleStrategy>>,
    pub tests: Option<Vec<TestKind>>,
    pub delta_grid: Option<Vec<f64>>,
    pub reps: Option<usize>,
    pub n: Option<usize>,
    pub p1: Option<usize>,
    pub p2: Option<usize>,
    pub noise_sd: Option<f64>,
    pub interaction_scale: Option<InteractionScale>,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub data: Option<PathBuf>,
    pub response: Option<String>,
    pub group1: Option<Vec<String>>,
    pub group2: Option<Vec<String>>,
    pub library: Option<LibraryValue>,
    pub criterion: Option<TuningCriterion>,
    pub strategy: Option<EnsembleStrategy>,
    pub beta: Option<f64>,
    pub lambda_grid: Option<LambdaGrid>,
    pub test: Option<TestKind>,
    #[serde(rename = "B")]
    pub b: Option<usize>,
    pub seed: Option<u64>,
    pub corrected_pvalue: Option<bool>,
    pub replicate_fit: Option<ReplicateFit>,
    /// Kernel spec for a fixed interaction kernel; the ensemble-weighted one otherwise.
    pub interaction_kernel: Option<String>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub skip_errors: Option<bool>,
    pub libraries: BTreeMap<String, Vec<String>>,
    pub simulate: SimulateSection,
}

impl ConfigFile {
    /// Reads a config file; relative `data` and `out` paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: ConfigFile = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data, &mut cfg.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn section(&self, name: &str) -> Option<Result<Vec<KernelSpec>>> {
        self.libraries
            .get(name)
            .map(|specs| parse_specs(specs.iter().map(String::as_str), name))
    }

    /// Named config sections, parsed.
    pub fn custom_libraries(&self) -> Result<BTreeMap<String, Vec<KernelSpec>>> {
        self.libraries
            .iter()
            .map(|(name, specs)| Ok((name.clone(), parse_specs(specs.iter().map(String::as_str), name)?)))
            .collect()
    }
}

fn parse_specs<'a>(specs: impl Iterator<Item = &'a str>, context: &str) -> Result<Vec<KernelSpec>> {
    let parsed = specs
        .map(|s| s.parse::<KernelSpec>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("library `{context}`: {e}")))?;
    if parsed.is_empty() {
        return Err(CliError::Usage(format!("library `{context}` is empty")));
    }
    Ok(parsed)
}

/// Resolves a library as a config section, a built-in name, or a comma-separated spec list.
pub fn resolve_library(value: &str, config: &ConfigFile) -> Result<Vec<KernelSpec>> {
    let value = value.trim();
    if let Some(section) = config.section(value) {
        return section;
    }
    if simulation::LIBRARIES.contains(&value) {
        return Ok(simulation::library(value)?);
    }
    parse_specs(value.split(',').filter(|s| !s.trim().is_empty()), value).map_err(|e| {
        let sections: Vec<&str> = config.libraries.keys().map(String::as_str).collect();
        CliError::Usage(format!(
            "{e}; expected a config section ({}), a built-in library ({}), or kernel specs like `rbf:l=0.5,polynomial:p=2`",
            if sections.is_empty() { "none defined".to_string() } else { sections.join(", ") },
            simulation::LIBRARIES.join(", "),
        ))
    })
}

fn resolve_library_value(value: &LibraryValue, config: &ConfigFile) -> Result<Vec<KernelSpec>> {
    match value {
        LibraryValue::Name(name) => resolve_library(name, config),
        LibraryValue::Specs(specs) => parse_specs(specs.iter().map(String::as_str), "config library"),
    }
}

/// Input columns for `fit` and `test`.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSettings {
    pub path: PathBuf,
    pub response: String,
    pub group1: Vec<String>,
    pub group2: Vec<String>,
}

/// Flag values before merging; `None` means "not given on the command line".
#[derive(Clone, Debug, Default)]
pub struct FlagValues {
    pub data: Option<PathBuf>,
    pub response: Option<String>,
    pub group1: Option<Vec<String>>,
    pub group2: Option<Vec<String>>,
    pub library: Option<String>,
    pub criterion: Option<TuningCriterion>,
    pub strategy: Option<EnsembleStrategy>,
    pub beta: Option<f64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub test: Option<TestKind>,
    pub b: Option<usize>,
    pub seed: Option<u64>,
    pub corrected_pvalue: bool,
    pub replicate_fit: Option<ReplicateFit>,
    pub interaction_kernel: Option<String>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub skip_errors: bool,
}

/// Merged settings for one command.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: Option<DataSettings>,
    pub library: Option<Vec<KernelSpec>>,
    pub test: TestOptions,
    pub out: Option<PathBuf>,
    pub format: Format,
    pub skip_errors: bool,
}

pub fn parse_config(flags: &FlagValues, config: &ConfigFile) -> Result<RunConfig> {
    let grid = match (&flags.lambda_grid, &config.lambda_grid) {
        (Some(values), _) => LambdaGrid::new(values.clone())?,
        (None, Some(grid)) => grid.clone(),
        (None, None) => LambdaGrid::default(),
    };
    let cvek = CvekOptions {
        criterion: flags.criterion.or(config.criterion).unwrap_or(TuningCriterion::Loocv),
        strategy: flags.strategy.or(config.strategy).unwrap_or(EnsembleStrategy::Stack),
        beta: flags.beta.or(config.beta).unwrap_or(1.0),
        grid,
    };
    let rule = if flags.corrected_pvalue || config.corrected_pvalue.unwrap_or(false) {
        BootstrapRule::Corrected
    } else {
        BootstrapRule::Raw
    };
    let interaction = match flags.interaction_kernel.as_ref().or(config.interaction_kernel.as_ref()) {
        None => InteractionKernel::EnsembleWeighted,
        Some(s) if s.trim() == "ensemble" => InteractionKernel::EnsembleWeighted,
        Some(s) => InteractionKernel::Fixed(
            s.parse()
                .map_err(|e| CliError::Usage(format!("interaction kernel: {e}")))?,
        ),
    };
    let test = TestOptions {
        cvek,
        kind: flags.test.or(config.test).unwrap_or(TestKind::Boot),
        bootstrap: BootstrapOptions {
            replicates: flags.b.or(config.b).unwrap_or(100),
            seed: flags.seed.or(config.seed).unwrap_or(0),
            rule,
            fit: flags.replicate_fit.or(config.replicate_fit).unwrap_or_default(),
        },
        interaction,
    };
    if test.bootstrap.replicates == 0 {
        return Err(CliError::Usage("B must be at least 1".into()));
    }
    let library = match (&flags.library, &config.library) {
        (Some(v), _) => Some(resolve_library(v, config)?),
        (None, Some(v)) => Some(resolve_library_value(v, config)?),
        (None, None) => None,
    };
    let path = flags.data.clone().or_else(|| config.data.clone());
    let data = match path {
        None => None,
        Some(path) => {
            let response = flags
                .response
                .clone()
                .or_else(|| config.response.clone())
                .ok_or_else(|| CliError::Usage("missing --response".into()))?;
            let group1 = flags
                .group1
                .clone()
                .or_else(|| config.group1.clone())
                .ok_or_else(|| CliError::Usage("missing --group1".into()))?;
            let group2 = flags
                .group2
                .clone()
                .or_else(|| config.group2.clone())
                .ok_or_else(|| CliError::Usage("missing --group2".into()))?;
            crate::dataset::check_groups(&response, &group1, &group2)?;
            Some(DataSettings {
                path,
                response,
                group1,
                group2,
            })
        }
    };
    Ok(RunConfig {
        data,
        library,
        test,
        out: flags.out.clone().or_else(|| config.out.clone()),
        format: flags.format.or(config.format).unwrap_or_default(),
        skip_errors: flags.skip_errors || config.skip_errors.unwrap_or(false),
    })
}

/// Grid selections given on the command line for `simulate`.
#[derive(Clone, Debug, Default)]
pub struct GridFlags {
    pub data_kernels: Option<Vec<String>>,
    pub libraries: Option<Vec<String>>,
    pub criteria: Option<Vec<TuningCriterion>>,
    pub strategies: Option<Vec<EnsembleStrategy>>,
    pub tests: Option<Vec<TestKind>>,
    pub delta_grid: Option<Vec<f64>>,
    pub reps: Option<usize>,
    pub n: Option<usize>,
    pub p1: Option<usize>,
    pub p2: Option<usize>,
    pub noise_sd: Option<f64>,
    pub interaction_scale: Option<InteractionScale>,
}

/// Scenario-grid settings; unspecified axes cover the full built-in grid.
pub fn grid_config(flags: &GridFlags, run: &RunConfig, config: &ConfigFile) -> Result<GridConfig> {
    let sim = &config.simulate;
    let defaults = GridConfig::default();
    let pick =
        |f: &Option<Vec<String>>, c: &Option<Vec<String>>, d: Vec<String>| f.clone().or_else(|| c.clone()).unwrap_or(d);
    let grid = GridConfig {
        data_kernels: pick(&flags.data_kernels, &sim.data_kernels, defaults.data_kernels),
        libraries: pick(&flags.libraries, &sim.libraries, defaults.libraries),
        custom_libraries: config.custom_libraries()?,
        criteria: flags
            .criteria
            .clone()
            .or_else(|| sim.criteria.clone())
            .unwrap_or(defaults.criteria),
        strategies: flags
            .strategies
            .clone()
            .or_else(|| sim.strategies.clone())
            .unwrap_or(defaults.strategies),
        tests: flags
            .tests
            .clone()
            .or_else(|| sim.tests.clone())
            .unwrap_or(defaults.tests),
        deltas: flags
            .delta_grid
            .clone()
            .or_else(|| sim.delta_grid.clone())
            .unwrap_or(defaults.deltas),
        n: flags.n.or(sim.n).unwrap_or(defaults.n),
        p1: flags.p1.or(sim.p1).unwrap_or(defaults.p1),
        p2: flags.p2.or(sim.p2).unwrap_or(defaults.p2),
        noise_sd: flags.noise_sd.or(sim.noise_sd).unwrap_or(defaults.noise_sd),
        interaction_scale: flags.interaction_scale.or(sim.interaction_scale).unwrap_or_default(),
        beta: run.test.cvek.beta,
        grid: run.test.cvek.grid.clone(),
        bootstrap_replicates: run.test.bootstrap.replicates,
        reps: flags.reps.or(sim.reps).unwrap_or(defaults.reps),
        master_seed: run.test.bootstrap.seed,
    };
    for (axis, empty) in [
        ("data kernels", grid.data_kernels.is_empty()),
        ("libraries", grid.libraries.is_empty()),
        ("criteria", grid.criteria.is_empty()),
        ("strategies", grid.strategies.is_empty()),
        ("tests", grid.tests.is_empty()),
        ("delta grid", grid.deltas.is_empty()),
    ] {
        if empty {
            return Err(CliError::Usage(format!("simulation {axis} list is empty")));
        }
    }
    if let Some(d) = grid.deltas.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(CliError::Usage(format!(
            "delta values must be finite and >= 0, got {d}"
        )));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_config_beats_default() {
        let cfg: ConfigFile = toml::from_str("criterion = \"gcv\"\nB = 40\n").unwrap();
        let run = parse_config(&FlagValues::default(), &cfg).unwrap();
        assert_eq!(run.test.cvek.criterion, TuningCriterion::Gcv);
        assert_eq!(run.test.bootstrap.replicates, 40);
        assert_eq!(run.test.cvek.strategy, EnsembleStrategy::Stack);
        let flags = FlagValues {
            criterion: Some(TuningCriterion::Aic),
            ..FlagValues::default()
        };
        let run = parse_config(&flags, &cfg).unwrap();
        assert_eq!(run.test.cvek.criterion, TuningCriterion::Aic);
        assert_eq!(run.test.bootstrap.replicates, 40);
    }

    #[test]
    fn defaults() {
        let run = parse_config(&FlagValues::default(), &ConfigFile::default()).unwrap();
        assert_eq!(run.test.cvek.criterion, TuningCriterion::Loocv);
        assert_eq!(run.test.cvek.strategy, EnsembleStrategy::Stack);
        assert_eq!(run.test.kind, TestKind::Boot);
        assert_eq!(run.test.bootstrap.replicates, 100);
        assert_eq!(run.test.cvek.grid, LambdaGrid::default());
        assert_eq!(run.format, Format::Csv);
    }

    #[test]
    fn overlapping_groups_name_the_column() {
        let flags = FlagValues {
            data: Some("d.csv".into()),
            response: Some("y".into()),
            group1: Some(vec!["a".into(), "b".into()]),
            group2: Some(vec!["b".into(), "c".into()]),
            ..FlagValues::default()
        };
        let err = parse_config(&flags, &ConfigFile::default()).unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn library_resolution_order() {
        let cfg: ConfigFile =
            toml::from_str("[libraries]\nrbf = [\"rbf:l=0.25\"]\nmine = [\"linear\", \"nn\"]\n").unwrap();
        assert_eq!(resolve_library("rbf", &cfg).unwrap(), vec![KernelSpec::rbf(0.25)]);
        assert_eq!(resolve_library("mine", &cfg).unwrap().len(), 2);
        assert_eq!(resolve_library("poly", &cfg).unwrap().len(), 3);
        assert_eq!(
            resolve_library("rbf:l=0.5, polynomial:p=2", &cfg).unwrap(),
            vec![KernelSpec::rbf(0.5), KernelSpec::polynomial(2)]
        );
        assert!(resolve_library("splines", &cfg).is_err());
    }

    #[test]
    fn unknown_config_keys_rejected() {
        assert!(toml::from_str::<ConfigFile>("criterion = \"loocv\"\nbogus = 1\n").is_err());
        assert!(toml::from_str::<ConfigFile>("criterion = \"cv\"\n").is_err());
    }

    #[test]
    fn grid_flags_override_section() {
        let cfg: ConfigFile =
            toml::from_str("[simulate]\nreps = 7\ndelta_grid = [0.0, 1.0]\ncriteria = [\"gcv\"]\n").unwrap();
        let run = parse_config(&FlagValues::default(), &cfg).unwrap();
        let flags = GridFlags {
            delta_grid: Some(vec![0.5]),
            ..GridFlags::default()
        };
        let grid = grid_config(&flags, &run, &cfg).unwrap();
        assert_eq!(grid.reps, 7);
        assert_eq!(grid.deltas, vec![0.5]);
        assert_eq!(grid.criteria, vec![TuningCriterion::Gcv]);
        assert_eq!(grid.strategies.len(), 3);
    }
}
