use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn gatecast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatecast"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gatecast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 14] = [
    "--profile", "quick", "--series", "3", "--length", "200", "--window", "10", "--test-samples", "40",
    "--units", "4", "--epochs", "3",
];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(TINY.iter()).chain(tail).copied().collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn baseline_only_experiment_is_fast_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let start = Instant::now();
    ok(&[
        "experiment", "--profile", "quick", "--models", "baseline", "--out", path(&out),
    ]);
    assert!(start.elapsed().as_secs_f64() < 1.0);
    for f in ["reports.csv", "stats.csv", "summary.csv", "config.echo", "plot_series_10_f1.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let plot = fs::read_to_string(out.join("plot_series_10_f1.csv")).unwrap();
    assert_eq!(plot.lines().count(), 101);
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&with(&["experiment"], &["--steps", "1", "--seed", "5", "--out", path(&a)]));
    let echo = a.join("config.echo");
    ok(&["experiment", "--config", path(&echo), "--out", path(&b)]);
    for f in ["reports.csv", "stats.csv", "config.echo", "model_gru_f1.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "profile = quick\n# comment\nseries = 3\nlength = 200\nmodels = baseline\nwindow = 10\nsteps = 1\n").unwrap();
    let out = dir.path().join("o");
    ok(&["experiment", "--config", path(&cfg), "--window", "12", "--test-samples", "30", "--out", path(&out)]);
    let echo = fs::read_to_string(out.join("config.echo")).unwrap();
    assert!(echo.contains("window = 12"));
    assert!(echo.contains("series = 3"));
}

#[test]
fn generate_train_evaluate_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    ok(&with(&["generate"], &["--out", path(&csv)]));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("t,series_1,series_2,series_3"));
    assert_eq!(text.lines().count(), 201);

    let models = dir.path().join("models");
    ok(&with(&["train"], &["--dataset", path(&csv), "--model", "gru", "--steps", "2", "--out", path(&models)]));
    let ckpt = models.join("model_gru_f2.ckpt");
    assert!(ckpt.exists());
    assert_eq!(fs::read_to_string(models.join("loss_gru_f2.csv")).unwrap().lines().count(), 4);

    let eval = dir.path().join("eval");
    let stdout = ok(&with(
        &["evaluate"],
        &["--dataset", path(&csv), "--checkpoint", path(&ckpt), "--out", path(&eval)],
    ));
    assert_eq!(stdout.lines().count(), 7);
    assert!(stdout.contains("series_3,GRU,2,"));

    let plot = dir.path().join("plot.csv");
    ok(&with(
        &["plot-data"],
        &[
            "--dataset", path(&csv), "--checkpoint", path(&ckpt), "--name", "series_2", "--count", "5", "--svg",
            "--out", path(&plot),
        ],
    ));
    let rows: Vec<String> = fs::read_to_string(&plot).unwrap().lines().map(String::from).collect();
    assert_eq!(rows[0], "t,actual,lstm,gru,baseline");
    assert_eq!(rows.len(), 6);
    assert!(rows[1].split(',').nth(2).unwrap().is_empty());
    assert!(dir.path().join("plot.svg").exists());
}

#[test]
fn plotted_actuals_are_the_raw_values() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    ok(&with(&["generate"], &["--out", path(&csv)]));
    let plot = dir.path().join("plot.csv");
    ok(&with(
        &["plot-data"],
        &["--dataset", path(&csv), "--models", "baseline", "--name", "series_1", "--count", "40", "--out", path(&plot)],
    ));
    let raw: Vec<f64> = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let plotted: Vec<f64> = fs::read_to_string(&plot)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(plotted, raw[160..].to_vec());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let code = |args: &[&str]| gatecast(args).status.code().unwrap();

    assert_eq!(code(&["experiment", "--profile", "quick", "--window", "900", "--models", "baseline", "--out", path(&out)]), 2);
    assert!(out.join("INCOMPLETE").exists());
    assert_eq!(code(&["experiment", "--profile", "nope", "--out", path(&out)]), 2);
    assert_eq!(code(&["experiment", "--bogus-flag"]), 2);

    let flat = dir.path().join("flat.csv");
    fs::write(&flat, format!("t,a\n{}", (0..200).map(|i| format!("{i},3.0\n")).collect::<String>())).unwrap();
    assert_eq!(code(&with(&["experiment"], &["--dataset", path(&flat), "--models", "baseline", "--out", path(&out)])), 3);

    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&with(&["experiment"], &["--dataset", path(&missing), "--out", path(&out)])), 3);

    let huge = dir.path().join("huge.csv");
    fs::write(&huge, format!("t,a\n{}", (0..200).map(|i| format!("{i},{}e300\n", 1 + i % 7)).collect::<String>())).unwrap();
    assert_eq!(
        code(&with(&["experiment"], &["--dataset", path(&huge), "--lr", "1e300", "--steps", "1", "--models", "gru", "--out", path(&out)])),
        4
    );
}
