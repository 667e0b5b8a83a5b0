use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvek::simulation::generate_data;
use cvek::KernelSpec;
use tempfile::TempDir;

fn cvek(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvek"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Worked-example shaped data: n=100, two 2-column groups, rbf effects, interaction 0.3.
fn write_example(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let data = generate_data(100, 2, 2, &KernelSpec::rbf(1.0), 0.3, 0.01, seed).unwrap();
    let mut text = String::from("y,x1,x2,x3,x4\n");
    for i in 0..100 {
        writeln!(
            text,
            "{},{},{},{},{}",
            data.y[i],
            data.x1.values[(i, 0)],
            data.x1.values[(i, 1)],
            data.x2.values[(i, 0)],
            data.x2.values[(i, 1)]
        )
        .unwrap();
    }
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

const LIBRARY: &str = "rbf:l=0.5,polynomial:p=2,matern:nu=3/2:l=1.5";

fn data_args(path: &Path) -> Vec<String> {
    [
        "--data",
        path.to_str().unwrap(),
        "--response",
        "y",
        "--group1",
        "x1,x2",
        "--group2",
        "x3,x4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_with(cmd: &str, path: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string()];
    args.extend(data_args(path));
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    cvek(&refs)
}

#[test]
fn kernels_lists_seven_families() {
    let out = cvek(&["kernels"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let names: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(
        names,
        ["intercept", "linear", "polynomial", "rbf", "matern", "rational", "nn"]
    );
    let matern = text.lines().find(|l| l.starts_with("matern")).unwrap();
    assert!(matern.contains("l,nu"), "{matern}");
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = cvek(&["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--bogus"));
    assert_eq!(cvek(&["--help"]).status.code(), Some(0));
}

#[test]
fn overlapping_groups_name_the_column() {
    let dir = TempDir::new().unwrap();
    let path = write_example(dir.path(), "d.csv", 1);
    let out = cvek(&[
        "fit",
        "--data",
        path.to_str().unwrap(),
        "--response",
        "y",
        "--group1",
        "x1,x2",
        "--group2",
        "x2,x3",
        "--library",
        LIBRARY,
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("`x2`"), "{}", stderr(&out));
}

#[test]
fn missing_column_lists_available_columns() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("d.csv");
    std::fs::write(&path, "y,a,b,c\n1,2,3,4\n2,3,4,5\n").unwrap();
    let out = cvek(&[
        "fit",
        "--data",
        path.to_str().unwrap(),
        "--response",
        "y",
        "--group1",
        "a",
        "--group2",
        "zz",
        "--library",
        "rbf",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("zz") && err.contains("y, a, b, c"), "{err}");
}

#[test]
fn non_numeric_cell_reports_row_and_column() {
    let dir = TempDir::new().unwrap();
    let mut text = String::from("y,x1,x2,x3,x4\n");
    for i in 1..=20 {
        let x3 = if i == 17 { "abc".to_string() } else { i.to_string() };
        writeln!(text, "{i},{},{},{x3},{}", i * 2, i % 3, i % 5).unwrap();
    }
    let path = dir.path().join("d.csv");
    std::fs::write(&path, text).unwrap();
    let out = run_with("fit", &path, &["--library", "rbf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("row 17, column x3"), "{}", stderr(&out));
}

#[test]
fn empty_file_is_data_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("empty.csv");
    std::fs::write(&path, "").unwrap();
    let out = run_with("fit", &path, &["--library", "rbf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));
}

#[test]
fn malformed_config_is_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "criterion = [\n").unwrap();
    let out = cvek(&["--config", cfg.to_str().unwrap(), "kernels"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("malformed config"));
}

#[test]
fn fit_reports_weights_and_lambdas() {
    let dir = TempDir::new().unwrap();
    let path = write_example(dir.path(), "d.csv", 2);
    let out = run_with("fit", &path, &["--library", LIBRARY]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let w: Vec<f64> = serde_json::from_value(v["weights"].clone()).unwrap();
    assert_eq!(w.len(), 3);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(v["base_lambdas"].as_array().unwrap().len(), 3);
    assert_eq!(v["criterion"], "loocv");
    assert_eq!(v["strategy"], "stack");
}

#[test]
fn flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    write_example(dir.path(), "d.csv", 3);
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "data = \"d.csv\"\nresponse = \"y\"\ngroup1 = [\"x1\", \"x2\"]\ngroup2 = [\"x3\", \"x4\"]\n\
         library = \"mine\"\ncriterion = \"gcv\"\nstrategy = \"avg\"\nB = 30\n\n[libraries]\nmine = [\"rbf:l=1\", \"linear\"]\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let out = cvek(&["--config", cfg, "fit"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["criterion"], "gcv");
    assert_eq!(v["strategy"], "avg");
    assert_eq!(v["library"], serde_json::json!(["rbf:l=1", "linear"]));

    let out = cvek(&["--config", cfg, "fit", "--criterion", "aic"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["criterion"], "aic");
    assert_eq!(v["strategy"], "avg");

    let out = cvek(&["--config", cfg, "test", "--B", "7", "--test", "boot"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["replicates"], 7);
}

#[test]
fn simulate_is_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let mut files = Vec::new();
    for (i, jobs) in ["1", "3"].iter().enumerate() {
        let out_path = dir.path().join(format!("sim{i}.csv"));
        let out = cvek(&[
            "--jobs",
            jobs,
            "simulate",
            "--data-kernels",
            "rbf",
            "--library",
            "rbf",
            "--criterion",
            "loocv,gcv",
            "--strategy",
            "stack",
            "--test",
            "boot,asym",
            "--delta-grid",
            "0,0.5",
            "--reps",
            "3",
            "--B",
            "20",
            "--seed",
            "11",
            "--n",
            "40",
            "--out",
            out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        assert!(stdout(&out).is_empty());
        let detail = std::fs::read(&out_path).unwrap();
        let summary = std::fs::read(dir.path().join(format!("sim{i}.summary.csv"))).unwrap();
        files.push((detail, summary));
    }
    assert_eq!(files[0], files[1]);
    let detail = String::from_utf8(files[0].0.clone()).unwrap();
    assert_eq!(detail.lines().count(), 1 + 8 * 3);
    assert_eq!(
        detail.lines().next().unwrap(),
        "scenario_id,data_kernel,delta,library,criterion,strategy,test,rep,pvalue"
    );

    // rejection_rate equals the mean of p <= 0.05 per scenario
    let summary = String::from_utf8(files[0].1.clone()).unwrap();
    assert_eq!(summary.lines().count(), 1 + 8);
    for line in summary.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let id = cols[0];
        let ps: Vec<f64> = detail
            .lines()
            .skip(1)
            .filter(|l| l.split(',').next() == Some(id))
            .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
            .collect();
        let rate = ps.iter().filter(|p| **p <= 0.05).count() as f64 / ps.len() as f64;
        assert_eq!(cols[7].parse::<f64>().unwrap(), rate);
    }
}

#[test]
fn simulate_json_lines() {
    let dir = TempDir::new().unwrap();
    let out_path = dir.path().join("sim.jsonl");
    let out = cvek(&[
        "simulate",
        "--data-kernels",
        "linear",
        "--library",
        "poly",
        "--criterion",
        "gcv",
        "--strategy",
        "avg",
        "--test",
        "asym",
        "--delta-grid",
        "0",
        "--reps",
        "2",
        "--n",
        "30",
        "--format",
        "json-lines",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().count(), 2);
    let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(row["rep"], 0);
    assert!(dir.path().join("sim.summary.jsonl").exists());
}

#[test]
fn unknown_library_is_usage_error() {
    let out = cvek(&["simulate", "--library", "splines", "--reps", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("splines"));
}

#[test]
fn worked_example_rejects_in_most_seeds() {
    let dir = TempDir::new().unwrap();
    let mut rejections = 0;
    let seeds = 5;
    for seed in 0..seeds {
        let path = write_example(dir.path(), &format!("d{seed}.csv"), 100 + seed);
        let out = run_with(
            "test",
            &path,
            &["--library", LIBRARY, "--B", "100", "--seed", &seed.to_string()],
        );
        assert!(out.status.success(), "{}", stderr(&out));
        let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
        let p = v["pvalue"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(v["statistic"].as_f64().is_some());
        if p <= 0.05 {
            rejections += 1;
        }
    }
    assert!(rejections * 2 > seeds, "{rejections}/{seeds} seeds rejected");
}

#[test]
fn test_output_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let path = write_example(dir.path(), "d.csv", 9);
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for out in [&a, &b] {
        let o = run_with(
            "test",
            &path,
            &[
                "--library",
                LIBRARY,
                "--B",
                "30",
                "--seed",
                "4",
                "--out",
                out.to_str().unwrap(),
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}
