//! Result files and structured single-run output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use cvek::hypothesis::TestResult;
use cvek::simulation::ScenarioResult;
use cvek::{EnsembleFit, KernelSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Csv,
    JsonLines,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::JsonLines => "jsonl",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct DetailRow<'a> {
    pub scenario_id: usize,
    pub data_kernel: &'a str,
    pub delta: f64,
    pub library: &'a str,
    pub criterion: &'a str,
    pub strategy: &'a str,
    pub test: &'a str,
    pub rep: usize,
    pub pvalue: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct SummaryRow<'a> {
    pub scenario_id: usize,
    pub data_kernel: &'a str,
    pub delta: f64,
    pub library: &'a str,
    pub criterion: &'a str,
    pub strategy: &'a str,
    pub test: &'a str,
    pub rejection_rate: f64,
    pub reps: usize,
    pub failures: usize,
}

/// `runs.csv` -> `runs.summary.csv`
pub fn summary_path(detail: &Path, format: Format) -> PathBuf {
    let stem = detail
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    detail.with_file_name(format!("{stem}.summary.{}", format.extension()))
}

fn write_rows<T: Serialize>(path: &Path, format: Format, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let to_io = |e: csv::Error| CliError::io(path, std::io::Error::other(e));
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            for row in rows {
                w.serialize(row).map_err(to_io)?;
            }
            w.flush().map_err(|e| CliError::io(path, e))?;
        }
        Format::JsonLines => {
            let mut w = BufWriter::new(file);
            for row in rows {
                serde_json::to_writer(&mut w, &row).map_err(|e| CliError::io(path, e.into()))?;
                w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
            }
            w.flush().map_err(|e| CliError::io(path, e))?;
        }
    }
    Ok(())
}

/// Writes one row per (scenario, replicate) to `path` and one row per scenario
/// to [`summary_path`]. Rows are ordered by scenario id, then replicate.
pub fn emit_results(results: &[ScenarioResult], path: &Path, format: Format) -> Result<PathBuf> {
    if results.is_empty() {
        return Err(CliError::Usage("no results to write".into()));
    }
    let mut ordered: Vec<&ScenarioResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.scenario.id);
    let names: Vec<[&str; 3]> = ordered
        .iter()
        .map(|r| {
            let s = &r.scenario;
            [s.criterion.name(), s.strategy.name(), s.test_kind.name()]
        })
        .collect();
    let detail = ordered.iter().zip(&names).flat_map(|(r, n)| {
        let s = &r.scenario;
        r.pvalues.iter().enumerate().map(move |(rep, p)| DetailRow {
            scenario_id: s.id,
            data_kernel: &s.data_kernel,
            delta: s.delta,
            library: &s.library_name,
            criterion: n[0],
            strategy: n[1],
            test: n[2],
            rep,
            pvalue: *p,
        })
    });
    write_rows(path, format, detail)?;
    let summary_file = summary_path(path, format);
    let summary = ordered.iter().zip(&names).map(|(r, n)| {
        let s = &r.scenario;
        SummaryRow {
            scenario_id: s.id,
            data_kernel: &s.data_kernel,
            delta: s.delta,
            library: &s.library_name,
            criterion: n[0],
            strategy: n[1],
            test: n[2],
            rejection_rate: r.rejection_rate,
            reps: s.reps,
            failures: r.failures.len(),
        }
    });
    write_rows(&summary_file, format, summary)?;
    Ok(summary_file)
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub n: usize,
    pub library: Vec<String>,
    pub criterion: String,
    pub strategy: String,
    pub weights: Vec<f64>,
    pub base_lambdas: Vec<f64>,
    pub lambda_k: f64,
    pub lambda_ens: f64,
    pub intercept: f64,
    pub sigma2_hat: f64,
    pub tau_hat: f64,
}

impl FitReport {
    pub fn new(fit: &EnsembleFit, library: &[KernelSpec], criterion: &str, strategy: &str) -> Self {
        FitReport {
            n: fit.fitted.len(),
            library: library.iter().map(ToString::to_string).collect(),
            criterion: criterion.to_string(),
            strategy: strategy.to_string(),
            weights: fit.u_hat.values().to_vec(),
            base_lambdas: fit.base_lambdas(),
            lambda_k: fit.lambda_k,
            lambda_ens: fit.lambda_ens,
            intercept: fit.intercept,
            sigma2_hat: fit.sigma2_hat,
            tau_hat: fit.tau_hat,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct TestReport {
    #[serde(flatten)]
    pub fit: FitReport,
    #[serde(flatten)]
    pub test: TestResult,
}

/// Pretty JSON to `out`, or to stdout when `out` is `None`.
pub fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    match out {
        Some(path) => std::fs::write(path, format!("{text}\n")).map_err(|e| CliError::io(path, e)),
        None => write_stdout(&format!("{text}\n")),
    }
}

/// Writes to standard output; a closed pipe (e.g. `| head`) is not an error.
pub fn write_stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io("<stdout>", e)),
        _ => Ok(()),
    }
}
