//! Argument parsing and command dispatch.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use clap::{Args, Parser, Subcommand};
use cvek::hypothesis::{fit_additive, run_test, ReplicateFit};
use cvek::simulation::{run_scenario, scenario_grid, FailureMode, InteractionScale, ScenarioResult};
use cvek::{EnsembleStrategy, FeatureMatrix, KernelFamily, TestKind, TuningCriterion};
use rayon::prelude::*;

use crate::config::{grid_config, parse_config, ConfigFile, FlagValues, GridFlags, RunConfig};
use crate::dataset::{load_dataset, Dataset};
use crate::error::{CliError, Result};
use crate::output::{emit_results, write_json, write_stdout, FitReport, Format, TestReport};

#[derive(Debug, Parser)]
#[command(
    name = "cvek",
    version,
    about = "Cross-validated kernel ensembles and interaction tests"
)]
pub struct Cli {
    /// TOML config file; command-line flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the additive kernel ensemble and report weights and tuning parameters.
    Fit(FitArgs),
    /// Test for an interaction between the two feature groups.
    Test(TestArgs),
    /// Run the simulation grid and write per-replicate and per-scenario tables.
    Simulate(SimulateArgs),
    /// List the kernel families and their hyperparameters.
    Kernels,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// CSV file with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub response: Option<String>,
    /// Comma-separated column names.
    #[arg(long, value_delimiter = ',')]
    pub group1: Option<Vec<String>>,
    /// Comma-separated column names.
    #[arg(long, value_delimiter = ',')]
    pub group2: Option<Vec<String>>,
    /// Config section, built-in library name, or comma-separated kernel specs.
    #[arg(long)]
    pub library: Option<String>,
    #[arg(long)]
    pub criterion: Option<TuningCriterion>,
    #[arg(long)]
    pub strategy: Option<EnsembleStrategy>,
    /// Temperature for the exp strategy.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Comma-separated ridge penalties.
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    /// Output JSON file (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub test: Option<TestKind>,
    /// Bootstrap replicates.
    #[arg(long = "B", id = "B")]
    pub b: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use (1 + count) / (1 + B) for the bootstrap p-value.
    #[arg(long)]
    pub corrected_pvalue: bool,
    #[arg(long, value_parser = parse_replicate_fit)]
    pub replicate_fit: Option<ReplicateFit>,
    /// Kernel spec for the interaction direction, or `ensemble`.
    #[arg(long)]
    pub interaction_kernel: Option<String>,
}

fn parse_replicate_fit(s: &str) -> std::result::Result<ReplicateFit, String> {
    match s {
        "refit" => Ok(ReplicateFit::Refit),
        "fixed" => Ok(ReplicateFit::Fixed),
        _ => Err(format!("unknown replicate fit `{s}`; expected refit or fixed")),
    }
}

fn parse_scale(s: &str) -> std::result::Result<InteractionScale, String> {
    match s {
        "unit" => Ok(InteractionScale::Unit),
        "product" => Ok(InteractionScale::Product),
        _ => Err(format!("unknown interaction scale `{s}`; expected unit or product")),
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Comma-separated data-generating kernels.
    #[arg(long, value_delimiter = ',')]
    pub data_kernels: Option<Vec<String>>,
    /// Comma-separated library names (config sections or built-ins).
    #[arg(long, value_delimiter = ',')]
    pub library: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub criterion: Option<Vec<TuningCriterion>>,
    #[arg(long, value_delimiter = ',')]
    pub strategy: Option<Vec<EnsembleStrategy>>,
    #[arg(long, value_delimiter = ',')]
    pub test: Option<Vec<TestKind>>,
    #[arg(long, value_delimiter = ',')]
    pub delta_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Bootstrap replicates per test.
    #[arg(long = "B", id = "B")]
    pub b: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
    #[arg(long, value_parser = parse_scale)]
    pub interaction_scale: Option<InteractionScale>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    /// Per-replicate table; the summary goes next to it as `<stem>.summary.<ext>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Record failing replicates instead of aborting.
    #[arg(long)]
    pub skip_errors: bool,
}

fn model_flags(m: &ModelArgs) -> FlagValues {
    FlagValues {
        data: m.data.clone(),
        response: m.response.clone(),
        group1: m.group1.clone(),
        group2: m.group2.clone(),
        library: m.library.clone(),
        criterion: m.criterion,
        strategy: m.strategy,
        beta: m.beta,
        lambda_grid: m.lambda_grid.clone(),
        out: m.out.clone(),
        ..FlagValues::default()
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            return Err(CliError::Usage(
                e.render().to_string().trim_start_matches("error: ").to_string(),
            ))
        }
    };
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        // a second call in the same process keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    let config = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Fit(args) => fit(&parse_config(&model_flags(&args.model), &config)?),
        Command::Test(args) => {
            let flags = FlagValues {
                test: args.test,
                b: args.b,
                seed: args.seed,
                corrected_pvalue: args.corrected_pvalue,
                replicate_fit: args.replicate_fit,
                interaction_kernel: args.interaction_kernel.clone(),
                ..model_flags(&args.model)
            };
            test(&parse_config(&flags, &config)?)
        }
        Command::Simulate(args) => simulate(args, &config),
        Command::Kernels => write_stdout(&kernels_table()),
    }
}

pub fn kernels_table() -> String {
    let mut out = String::new();
    for family in KernelFamily::ALL {
        let params = family.required_params();
        let params = if params.is_empty() {
            "-".to_string()
        } else {
            params.join(",")
        };
        out.push_str(&format!("{:<11} {:<8} {}\n", family.name(), params, family.formula()));
    }
    out
}

struct Loaded {
    data: Dataset,
    x1: FeatureMatrix,
    x2: FeatureMatrix,
    library: Vec<cvek::KernelSpec>,
}

fn load(run: &RunConfig) -> Result<Loaded> {
    let settings = run
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("missing --data".into()))?;
    let library = run
        .library
        .clone()
        .ok_or_else(|| CliError::Usage("missing --library".into()))?;
    let data = load_dataset(&settings.path, &settings.response, &settings.group1, &settings.group2)?;
    let x1 = FeatureMatrix::new(data.x1.clone(), data.group1.clone())?;
    let x2 = FeatureMatrix::new(data.x2.clone(), data.group2.clone())?;
    Ok(Loaded { data, x1, x2, library })
}

fn fit(run: &RunConfig) -> Result<()> {
    let l = load(run)?;
    eprintln!("fitting {} kernels on {} rows", l.library.len(), l.data.y.len());
    let fitted = fit_additive(&l.data.y, &l.x1, &l.x2, &l.library, &run.test.cvek)?;
    let report = FitReport::new(
        &fitted.fit,
        &l.library,
        run.test.cvek.criterion.name(),
        run.test.cvek.strategy.name(),
    );
    write_json(&report, run.out.as_deref())
}

fn test(run: &RunConfig) -> Result<()> {
    let l = load(run)?;
    eprintln!(
        "testing with {} kernels on {} rows ({} test)",
        l.library.len(),
        l.data.y.len(),
        run.test.kind.name()
    );
    let outcome = run_test(&l.data.y, &l.x1, &l.x2, &l.library, &run.test)?;
    let report = TestReport {
        fit: FitReport::new(
            &outcome.fit,
            &outcome.library,
            run.test.cvek.criterion.name(),
            run.test.cvek.strategy.name(),
        ),
        test: outcome.result,
    };
    write_json(&report, run.out.as_deref())
}

fn simulate(args: &SimulateArgs, config: &ConfigFile) -> Result<()> {
    let flags = FlagValues {
        b: args.b,
        seed: args.seed,
        lambda_grid: args.lambda_grid.clone(),
        out: args.out.clone(),
        format: args.format,
        skip_errors: args.skip_errors,
        ..FlagValues::default()
    };
    let run = parse_config(&flags, config)?;
    let grid_flags = GridFlags {
        data_kernels: args.data_kernels.clone(),
        libraries: args.library.clone(),
        criteria: args.criterion.clone(),
        strategies: args.strategy.clone(),
        tests: args.test.clone(),
        delta_grid: args.delta_grid.clone(),
        reps: args.reps,
        n: args.n,
        noise_sd: args.noise_sd,
        interaction_scale: args.interaction_scale,
        ..GridFlags::default()
    };
    let grid = grid_config(&grid_flags, &run, config)?;
    let scenarios = scenario_grid(&grid)?;
    let out = run
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("simulation.{}", run.format.extension())));
    let mode = if run.skip_errors {
        FailureMode::SkipErrors
    } else {
        FailureMode::FailFast
    };
    eprintln!("running {} scenarios x {} replicates", scenarios.len(), grid.reps);
    let done = AtomicUsize::new(0);
    let total = scenarios.len();
    let results: Vec<ScenarioResult> = scenarios
        .par_iter()
        .map(|s| {
            let r = run_scenario(s, mode)?;
            let k = done.fetch_add(1, Ordering::Relaxed) + 1;
            eprintln!(
                "[{k}/{total}] scenario {} ({} / {} / {} / {} / {} / delta {}): rejection rate {:.3} in {:.1}s",
                s.id,
                s.data_kernel,
                s.library_name,
                s.criterion,
                s.strategy,
                s.test_kind,
                s.delta,
                r.rejection_rate,
                r.wall_time.as_secs_f64()
            );
            Ok(r)
        })
        .collect::<cvek::Result<_>>()?;
    let failures: usize = results.iter().map(|r| r.failures.len()).sum();
    if failures > 0 {
        eprintln!("{failures} replicates failed and were skipped");
    }
    let summary = emit_results(&results, &out, run.format)?;
    eprintln!("wrote {} and {}", display(&out), display(&summary));
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
