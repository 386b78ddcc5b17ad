use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gatecast::checkpoint;
use gatecast::dataprep::write_wide_csv;
use gatecast::evaluation::{Baseline, Forecaster};
use gatecast::experiment::{
    evaluate_all, load_dataset, parse_settings, plot_csv, prepare, reports_csv,
    run_experiment_with, ExperimentConfig, Profile,
};
use gatecast::training::{train_with, TrainedModel};
use gatecast::{CellKind, Error, Execution, Result};

#[derive(Parser)]
#[command(name = "gatecast", version, about = "LSTM / GRU time-series forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to a wide CSV file.
    Generate {
        #[command(flatten)]
        opts: Options,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network on the training series.
    Train {
        #[command(flatten)]
        opts: Options,
        /// lstm or gru.
        #[arg(long, default_value = "lstm")]
        model: CellKind,
        /// Output directory for the checkpoint and loss history.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints and the baseline on every series.
    Evaluate {
        #[command(flatten)]
        opts: Options,
        /// Checkpoint files; the baseline is always included.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Full pipeline: train, evaluate, compare, report.
    Experiment {
        #[command(flatten)]
        opts: Options,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Actual vs predicted test values of one series, in original units.
    PlotData {
        #[command(flatten)]
        opts: Options,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Series name, e.g. series_10.
        #[arg(long = "name")]
        name: String,
        /// First test point.
        #[arg(long, default_value_t = 0)]
        from: usize,
        /// Number of test points.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Output CSV file; an SVG is written next to it with --svg.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Args, Default)]
struct Options {
    /// Key-value settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// quick or full (default full).
    #[arg(long)]
    profile: Option<String>,
    /// activities, random-walk, a directory of dated CSVs, or a wide CSV file.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    column: Option<String>,
    /// Keep only the last N samples of every series.
    #[arg(long)]
    keep: Option<usize>,
    /// Number of generated series.
    #[arg(long)]
    series: Option<usize>,
    /// Length of generated series.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Forecast horizons, comma separated.
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    test_samples: Option<usize>,
    #[arg(long)]
    train_index: Option<usize>,
    /// Models to evaluate, comma separated (lstm, gru, baseline).
    #[arg(long)]
    models: Option<String>,
    #[arg(long)]
    units: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gradient_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    norm_train_only: bool,
    #[arg(long)]
    no_peepholes: bool,
    #[arg(long)]
    exclude_train_series: bool,
    /// Run on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Options {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                parse_settings(&text)?
            }
            None => Vec::new(),
        };
        let file_profile = file.iter().find(|(k, _)| k == "profile").map(|(_, v)| v.as_str());
        let profile: Profile = self
            .profile
            .as_deref()
            .or(file_profile)
            .unwrap_or("full")
            .parse()?;
        let mut config = ExperimentConfig::profile(profile);
        for (k, v) in file.iter().filter(|(k, _)| k != "profile") {
            config.set(k, v)?;
        }

        let mut flags: Vec<(&str, String)> = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                flags.push((k, v));
            }
        };
        push("dataset", self.dataset.clone());
        push("column", self.column.clone());
        push("keep", self.keep.map(|v| v.to_string()));
        push("series", self.series.map(|v| v.to_string()));
        push("length", self.length.map(|v| v.to_string()));
        push("window", self.window.map(|v| v.to_string()));
        push("steps", self.steps.clone());
        push("test_samples", self.test_samples.map(|v| v.to_string()));
        push("train_index", self.train_index.map(|v| v.to_string()));
        push("models", self.models.clone());
        push("units", self.units.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("lr", self.lr.map(|v| v.to_string()));
        push("gradient_clip", self.gradient_clip.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("norm_train_only", self.norm_train_only.then(|| "true".into()));
        push("peepholes", self.no_peepholes.then(|| "false".into()));
        push("exclude_train_series", self.exclude_train_series.then(|| "true".into()));
        for (k, v) in flags {
            config.set(k, &v)?;
        }
        config.validate()?;
        Ok(config)
    }

    fn execution(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<TrainedModel>> {
    paths.iter().map(|p| checkpoint::load(p)).collect()
}

/// Horizon shared by all checkpoints, or the first configured one.
fn horizon(config: &ExperimentConfig, models: &[TrainedModel]) -> Result<usize> {
    match models.first() {
        Some(first) => {
            if models.iter().any(|m| m.steps() != first.steps()) {
                return Err(Error::Config("checkpoints disagree on the forecast horizon".into()));
            }
            Ok(first.steps())
        }
        None => Ok(config.steps[0]),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { opts, out } => {
            let config = opts.resolve()?;
            let series = load_dataset(&config)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                create_dir(parent)?;
            }
            write_wide_csv(&out, &series)?;
            println!("wrote {} series to {}", series.len(), out.display());
        }
        Command::Train { opts, model, out } => {
            let config = opts.resolve()?;
            let exec = opts.execution();
            let series = load_dataset(&config)?;
            let steps = config.steps[0];
            let train_series = series.get(config.train_index).ok_or_else(|| {
                Error::Config(format!("train index {} out of range", config.train_index))
            })?;
            let prepared = prepare(&config, std::slice::from_ref(train_series), steps)?;
            let (trained, history) =
                train_with(exec, model, &prepared[0].data, &config.train_config(model, steps))?;
            create_dir(&out)?;
            checkpoint::save(&trained, &out.join(format!("model_{model}_f{steps}.ckpt")))?;
            let mut loss = String::from("epoch,mse\n");
            for (i, l) in history.iter().enumerate() {
                loss += &format!("{},{}\n", i + 1, l);
            }
            write(&out.join(format!("loss_{model}_f{steps}.csv")), &loss)?;
            println!("{model} f={steps}: final training mse {}", trained.final_loss);
        }
        Command::Evaluate { opts, checkpoints, out } => {
            let config = opts.resolve()?;
            let models = load_models(&checkpoints)?;
            let steps = horizon(&config, &models)?;
            let series = load_dataset(&config)?;
            let prepared = prepare(&config, &series, steps)?;
            let baseline = Baseline { steps };
            let mut forecasters: Vec<&dyn Forecaster> = models.iter().map(|m| m as &dyn Forecaster).collect();
            forecasters.push(&baseline);
            let skip = config.exclude_train_series.then_some(config.train_index);
            let (reports, _) = evaluate_all(opts.execution(), &prepared, &forecasters, skip)?;
            create_dir(&out)?;
            write(&out.join("reports.csv"), &reports_csv(&reports))?;
            print!("{}", reports_csv(&reports));
        }
        Command::Experiment { opts, out } => {
            let config = opts.resolve()?;
            let result = run_experiment_with(opts.execution(), &config, Some(&out))?;
            for run in &result.runs {
                for s in &run.summaries {
                    println!(
                        "f={} {:<8} rmse {:.4} ± {:.4}  da {:.3} ± {:.3}",
                        s.steps, s.model, s.rmse_mean, s.rmse_sd, s.da_mean, s.da_sd
                    );
                }
                for c in &run.comparisons {
                    println!("{}  U={} p={:.4} ({})", c.label(), c.result.u_statistic, c.result.p_two_tailed, c.result.method.as_str());
                }
            }
            println!("outputs in {}", out.display());
        }
        Command::PlotData {
            opts,
            checkpoints,
            name,
            from,
            count,
            out,
            svg,
        } => {
            let config = opts.resolve()?;
            let models = load_models(&checkpoints)?;
            let steps = horizon(&config, &models)?;
            let series = load_dataset(&config)?;
            let index = series
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| Error::Config(format!("unknown series `{name}`")))?;
            let prepared = prepare(&config, &series[index..=index], steps)?;
            let baseline = Baseline { steps };
            let mut forecasters: Vec<&dyn Forecaster> = models.iter().map(|m| m as &dyn Forecaster).collect();
            forecasters.push(&baseline);
            let (_, forecasts) = evaluate_all(opts.execution(), &prepared, &forecasters, None)?;
            let range = from..from.saturating_add(count);
            write(&out, &plot_csv(&forecasts[0], range.clone()))?;
            if svg {
                write(&out.with_extension("svg"), &gatecast::experiment::plot_svg(&forecasts[0], range))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
