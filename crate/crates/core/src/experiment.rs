//! End-to-end experiment: load or generate a dataset, train one LSTM and one
//! GRU on a single series, evaluate every model on every series' test rows,
//! compare models with Mann-Whitney tests, and write the report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cells::{CellKind, LstmConfig, OutputPeephole};
use crate::checkpoint;
use crate::dataprep::{
    generate_activities, generate_random_walks, load_csv_dir, make_windows, normalize,
    normalize_prefix, read_wide_csv, truncate_tail, ActivitiesConfig, RandomWalkConfig, Series,
    WindowedDataset,
};
use crate::error::{Error, Result, ResultExt};
use crate::evaluation::{
    evaluate_predictions, mann_whitney_two_tailed, predict_test, Baseline, ForecastReport,
    Forecaster, MannWhitneyResult, ModelKind,
};
use crate::numerics::splitmix64;
use crate::par::Execution;
use crate::training::{train_with, TrainConfig, TrainedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Desk-scale run for CI and laptops.
    Quick,
    /// The full-size configuration: 3584-sample series, 128 units, 200 epochs.
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "quick" => Ok(Profile::Quick),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Activities,
    RandomWalk,
    /// Directory of dated CSV files, one series per file.
    CsvDir(PathBuf),
    /// Single file with header `t,<series>,…`.
    WideCsv(PathBuf),
}

impl DatasetSource {
    fn parse(value: &str) -> Self {
        match value.trim() {
            "activities" => DatasetSource::Activities,
            "random-walk" => DatasetSource::RandomWalk,
            path => {
                let p = PathBuf::from(path);
                if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                    DatasetSource::WideCsv(p)
                } else {
                    DatasetSource::CsvDir(p)
                }
            }
        }
    }

    fn describe(&self) -> String {
        match self {
            DatasetSource::Activities => "activities".into(),
            DatasetSource::RandomWalk => "random-walk".into(),
            DatasetSource::CsvDir(p) | DatasetSource::WideCsv(p) => p.display().to_string(),
        }
    }
}

/// Every knob of a run. Serialized as `key = value` lines; see
/// [`ExperimentConfig::set`] for the keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub column: String,
    pub keep: Option<usize>,
    pub series_count: usize,
    pub length: usize,
    pub slope: f64,
    pub noise_sd: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotation_step: usize,
    pub noise_after_scaling: bool,
    pub walk_start: f64,
    pub walk_sd: f64,
    pub window: usize,
    pub steps: Vec<usize>,
    pub test_samples: usize,
    pub train_index: usize,
    pub models: Vec<ModelKind>,
    pub units: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gradient_clip: Option<f64>,
    pub peepholes: bool,
    pub output_peephole: OutputPeephole,
    pub seed: u64,
    pub norm_train_only: bool,
    pub exclude_train_series: bool,
    pub plot_points: usize,
    pub plot_svg: bool,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let base = ExperimentConfig {
            dataset: DatasetSource::Activities,
            column: "Close".into(),
            keep: None,
            series_count: 10,
            length: 3584,
            slope: 0.0001,
            noise_sd: 0.05,
            scale_min: 0.5,
            scale_max: 10.0,
            rotation_step: 1,
            noise_after_scaling: false,
            walk_start: 100.0,
            walk_sd: 1.0,
            window: 60,
            steps: vec![1, 20],
            test_samples: 251,
            train_index: 0,
            models: vec![ModelKind::Lstm, ModelKind::Gru, ModelKind::Baseline],
            units: 128,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            gradient_clip: None,
            peepholes: true,
            output_peephole: OutputPeephole::Current,
            seed: 42,
            norm_train_only: false,
            exclude_train_series: false,
            plot_points: 100,
            plot_svg: false,
        };
        match profile {
            Profile::Full => base,
            Profile::Quick => ExperimentConfig {
                length: 700,
                units: 32,
                epochs: 60,
                ..base
            },
        }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v.trim().to_ascii_lowercase().as_str() {
                "true" | "yes" | "1" | "on" => Ok(true),
                "false" | "no" | "0" | "off" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
            }
        }
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "dataset" => self.dataset = DatasetSource::parse(v),
            "column" => self.column = v.to_string(),
            "keep" => self.keep = if v == "none" { None } else { Some(num(key, v)?) },
            "series" => self.series_count = num(key, v)?,
            "length" => self.length = num(key, v)?,
            "slope" => self.slope = num(key, v)?,
            "noise_sd" => self.noise_sd = num(key, v)?,
            "scale_min" => self.scale_min = num(key, v)?,
            "scale_max" => self.scale_max = num(key, v)?,
            "rotation_step" => self.rotation_step = num(key, v)?,
            "noise_after_scaling" => self.noise_after_scaling = flag(key, v)?,
            "walk_start" => self.walk_start = num(key, v)?,
            "walk_sd" => self.walk_sd = num(key, v)?,
            "window" => self.window = num(key, v)?,
            "steps" => {
                self.steps = v
                    .split(',')
                    .map(|s| num(key, s))
                    .collect::<Result<Vec<usize>>>()?
            }
            "test_samples" => self.test_samples = num(key, v)?,
            "train_index" => self.train_index = num(key, v)?,
            "models" => {
                self.models = v
                    .split(',')
                    .map(ModelKind::from_str)
                    .collect::<Result<Vec<_>>>()?
            }
            "units" => self.units = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" | "learning_rate" => self.learning_rate = num(key, v)?,
            "gradient_clip" => {
                self.gradient_clip = if v == "none" { None } else { Some(num(key, v)?) }
            }
            "peepholes" => self.peepholes = flag(key, v)?,
            "output_peephole" => {
                self.output_peephole = match v {
                    "current" => OutputPeephole::Current,
                    "previous" => OutputPeephole::Previous,
                    _ => return Err(Error::Config(format!("invalid output_peephole `{v}`"))),
                }
            }
            "seed" => self.seed = num(key, v)?,
            "norm_train_only" => self.norm_train_only = flag(key, v)?,
            "exclude_train_series" => self.exclude_train_series = flag(key, v)?,
            "plot_points" => self.plot_points = num(key, v)?,
            "plot_svg" => self.plot_svg = flag(key, v)?,
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(())
    }

    /// The effective configuration in the format [`parse_settings`] reads.
    pub fn to_settings(&self) -> String {
        let mut out = String::new();
        let opt_usize = |v: Option<usize>| v.map_or("none".to_string(), |k| k.to_string());
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let models = self
            .models
            .iter()
            .map(|m| m.label().to_ascii_lowercase())
            .collect::<Vec<_>>()
            .join(",");
        let pairs: Vec<(&str, String)> = vec![
            ("dataset", self.dataset.describe()),
            ("column", self.column.clone()),
            ("keep", opt_usize(self.keep)),
            ("series", self.series_count.to_string()),
            ("length", self.length.to_string()),
            ("slope", format!("{:e}", self.slope)),
            ("noise_sd", format!("{:e}", self.noise_sd)),
            ("scale_min", format!("{:e}", self.scale_min)),
            ("scale_max", format!("{:e}", self.scale_max)),
            ("rotation_step", self.rotation_step.to_string()),
            ("noise_after_scaling", self.noise_after_scaling.to_string()),
            ("walk_start", format!("{:e}", self.walk_start)),
            ("walk_sd", format!("{:e}", self.walk_sd)),
            ("window", self.window.to_string()),
            ("steps", list(&self.steps)),
            ("test_samples", self.test_samples.to_string()),
            ("train_index", self.train_index.to_string()),
            ("models", models),
            ("units", self.units.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:e}", self.learning_rate)),
            (
                "gradient_clip",
                self.gradient_clip.map_or("none".into(), |c| format!("{c:e}")),
            ),
            ("peepholes", self.peepholes.to_string()),
            (
                "output_peephole",
                match self.output_peephole {
                    OutputPeephole::Current => "current".into(),
                    OutputPeephole::Previous => "previous".into(),
                },
            ),
            ("seed", self.seed.to_string()),
            ("norm_train_only", self.norm_train_only.to_string()),
            ("exclude_train_series", self.exclude_train_series.to_string()),
            ("plot_points", self.plot_points.to_string()),
            ("plot_svg", self.plot_svg.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn activities(&self) -> ActivitiesConfig {
        ActivitiesConfig {
            n_series: self.series_count,
            length: self.length,
            slope: self.slope,
            noise_sd: self.noise_sd,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            rotation_step: self.rotation_step,
            noise_after_scaling: self.noise_after_scaling,
        }
    }

    pub fn random_walk(&self) -> RandomWalkConfig {
        RandomWalkConfig {
            n_series: self.series_count,
            length: self.length,
            start: self.walk_start,
            step_sd: self.walk_sd,
        }
    }

    /// Training settings for one network; the seed is derived from the
    /// master seed, the cell kind and the horizon.
    pub fn train_config(&self, kind: CellKind, steps: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: task_seed(self.seed, kind, steps),
            units: self.units,
            gradient_clip: self.gradient_clip,
            lstm: LstmConfig {
                peepholes: self.peepholes,
                output_peephole: self.output_peephole,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config("at least one forecast horizon is required".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        let mut seen = self.models.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.models.len() {
            return Err(Error::Config("models are listed more than once".into()));
        }
        if self.models.iter().any(|m| m.cell().is_some()) {
            self.train_config(CellKind::Lstm, 1).validate()?;
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_settings(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn task_seed(master: u64, kind: CellKind, steps: usize) -> u64 {
    let tag = match kind {
        CellKind::Lstm => 1u64,
        CellKind::Gru => 2u64,
    };
    splitmix64(master ^ splitmix64(tag << 32 | steps as u64))
}

fn dataset_seed(master: u64) -> u64 {
    splitmix64(master ^ 0x0DA7_A5E7)
}

/// Raw series of the configured dataset.
pub fn load_dataset(config: &ExperimentConfig) -> Result<Vec<Series>> {
    let series = match &config.dataset {
        DatasetSource::Activities => generate_activities(&config.activities(), dataset_seed(config.seed))?,
        DatasetSource::RandomWalk => generate_random_walks(&config.random_walk(), dataset_seed(config.seed))?,
        DatasetSource::CsvDir(dir) => load_csv_dir(dir, &config.column)?,
        DatasetSource::WideCsv(path) => read_wide_csv(path)?,
    };
    match config.keep {
        Some(keep) => series.iter().map(|s| truncate_tail(s, keep)).collect(),
        None => Ok(series),
    }
}

/// A raw series together with its normalized windows.
#[derive(Clone, Debug)]
pub struct PreparedSeries {
    pub raw: Series,
    pub data: WindowedDataset,
}

/// Normalizes and windows every series for horizon `steps`.
pub fn prepare(config: &ExperimentConfig, series: &[Series], steps: usize) -> Result<Vec<PreparedSeries>> {
    series
        .iter()
        .map(|s| {
            let (norm_series, record) = if config.norm_train_only {
                let prefix = s.len().saturating_sub(config.test_samples);
                normalize_prefix(s, prefix)?
            } else {
                normalize(s)?
            };
            let data = make_windows(&norm_series, config.window, steps, config.test_samples, record)?;
            Ok(PreparedSeries {
                raw: s.clone(),
                data,
            })
        })
        .collect::<Result<Vec<_>>>()
}

/// First-step forecasts over the test set in original units, for plotting.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesForecast {
    pub series: String,
    pub steps: usize,
    pub actual: Vec<f64>,
    pub predictions: BTreeMap<ModelKind, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub steps: usize,
    pub metric: &'static str,
    pub a: ModelKind,
    pub b: ModelKind,
    pub result: MannWhitneyResult,
}

impl Comparison {
    pub fn label(&self) -> String {
        format!("f{}:{}:{}-{}", self.steps, self.metric, self.a, self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub steps: usize,
    pub model: ModelKind,
    pub n: usize,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    pub da_mean: f64,
    pub da_sd: f64,
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for n < 2).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Everything produced for one forecast horizon.
#[derive(Clone, Debug)]
pub struct HorizonRun {
    pub steps: usize,
    pub reports: Vec<ForecastReport>,
    pub comparisons: Vec<Comparison>,
    pub summaries: Vec<Summary>,
    pub models: Vec<TrainedModel>,
    pub loss_histories: Vec<(CellKind, Vec<f64>)>,
    pub forecasts: Vec<SeriesForecast>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub runs: Vec<HorizonRun>,
}

impl ExperimentResult {
    pub fn run(&self, steps: usize) -> Option<&HorizonRun> {
        self.runs.iter().find(|r| r.steps == steps)
    }
}

/// The comparisons made for a model list, in output order.
fn comparison_pairs(models: &[ModelKind]) -> Vec<(ModelKind, ModelKind)> {
    let has = |m| models.contains(&m);
    let mut pairs = Vec::new();
    for (a, b) in [
        (ModelKind::Lstm, ModelKind::Baseline),
        (ModelKind::Gru, ModelKind::Baseline),
        (ModelKind::Lstm, ModelKind::Gru),
    ] {
        if has(a) && has(b) {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Evaluates `models` on every prepared series (optionally skipping one).
pub fn evaluate_all(
    exec: Execution,
    prepared: &[PreparedSeries],
    models: &[&dyn Forecaster],
    skip: Option<usize>,
) -> Result<(Vec<ForecastReport>, Vec<SeriesForecast>)> {
    let indices: Vec<usize> = (0..prepared.len()).filter(|&i| Some(i) != skip).collect();
    let per_series = exec.map(&indices, |&i| -> Result<(Vec<ForecastReport>, SeriesForecast)> {
        let p = &prepared[i];
        let d = &p.data;
        let actual: Vec<f64> = d.test_range().map(|r| p.raw.values[r + d.window]).collect();
        let mut reports = Vec::with_capacity(models.len());
        let mut predictions = BTreeMap::new();
        for model in models {
            let preds = predict_test(*model, d, Execution::Sequential)
                .and_then(|preds| {
                    let report = evaluate_predictions(model.kind(), d, &preds)?;
                    Ok((preds, report))
                })
                .context_with(|| format!("evaluating {} on `{}`", model.kind(), d.name))?;
            let (preds, report) = preds;
            predictions.insert(
                model.kind(),
                (0..preds.rows()).map(|k| d.norm.invert(preds.get(k, 0))).collect(),
            );
            reports.push(report);
        }
        Ok((
            reports,
            SeriesForecast {
                series: d.name.clone(),
                steps: d.steps,
                actual,
                predictions,
            },
        ))
    });
    let mut reports = Vec::new();
    let mut forecasts = Vec::new();
    for item in per_series {
        let (r, f) = item?;
        reports.extend(r);
        forecasts.push(f);
    }
    Ok((reports, forecasts))
}

fn compare_and_summarize(
    steps: usize,
    models: &[ModelKind],
    reports: &[ForecastReport],
) -> Result<(Vec<Comparison>, Vec<Summary>)> {
    let column = |m: ModelKind, metric: &str| -> Vec<f64> {
        reports
            .iter()
            .filter(|r| r.model == m)
            .map(|r| if metric == "rmse" { r.rmse } else { r.da })
            .collect()
    };
    let mut comparisons = Vec::new();
    for metric in ["rmse", "da"] {
        for (a, b) in comparison_pairs(models) {
            let result = mann_whitney_two_tailed(&column(a, metric), &column(b, metric))
                .context_with(|| format!("comparing {a} and {b} on {metric}"))?;
            comparisons.push(Comparison {
                steps,
                metric,
                a,
                b,
                result,
            });
        }
    }
    let summaries = models
        .iter()
        .map(|&m| {
            let rmse = column(m, "rmse");
            let da = column(m, "da");
            let (rmse_mean, rmse_sd) = mean_sd(&rmse);
            let (da_mean, da_sd) = mean_sd(&da);
            Summary {
                steps,
                model: m,
                n: rmse.len(),
                rmse_mean,
                rmse_sd,
                da_mean,
                da_sd,
            }
        })
        .collect();
    Ok((comparisons, summaries))
}

/// Runs the whole pipeline and, when `out` is given, writes the output tree.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentResult> {
    run_experiment_with(Execution::default(), config, out)
}

pub fn run_experiment_with(
    exec: Execution,
    config: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let outcome = compute(exec, config);
    match (out, outcome) {
        (Some(dir), Ok(result)) => {
            if let Err(e) = write_outputs(&result, dir) {
                mark_incomplete(dir, &e);
                return Err(e);
            }
            Ok(result)
        }
        (Some(dir), Err(e)) => {
            mark_incomplete(dir, &e);
            Err(e)
        }
        (None, outcome) => outcome,
    }
}

fn compute(exec: Execution, config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let series = load_dataset(config)?;
    if config.train_index >= series.len() {
        return Err(Error::Config(format!(
            "train index {} out of range for {} series",
            config.train_index,
            series.len()
        )));
    }
    let cells: Vec<CellKind> = config.models.iter().filter_map(|m| m.cell()).collect();

    let mut runs = Vec::new();
    for &steps in &config.steps {
        let prepared = prepare(config, &series, steps).context_with(|| format!("preparing data for f = {steps}"))?;
        let train_set = &prepared[config.train_index].data;

        let trained = exec.map(&cells, |&kind| {
            train_with(exec, kind, train_set, &config.train_config(kind, steps))
                .context_with(|| format!("training {kind} for f = {steps} on `{}`", train_set.name))
        });
        let mut models = Vec::new();
        let mut loss_histories = Vec::new();
        for (kind, t) in cells.iter().zip(trained) {
            let (model, history) = t?;
            models.push(model);
            loss_histories.push((*kind, history));
        }

        let baseline = Baseline { steps };
        let forecasters: Vec<&dyn Forecaster> = config
            .models
            .iter()
            .map(|m| match m.cell() {
                Some(kind) => {
                    let idx = cells.iter().position(|&c| c == kind).expect("trained above");
                    &models[idx] as &dyn Forecaster
                }
                None => &baseline as &dyn Forecaster,
            })
            .collect();
        let skip = config.exclude_train_series.then_some(config.train_index);
        let (reports, forecasts) = evaluate_all(exec, &prepared, &forecasters, skip)?;
        let (comparisons, summaries) = compare_and_summarize(steps, &config.models, &reports)?;
        runs.push(HorizonRun {
            steps,
            reports,
            comparisons,
            summaries,
            models,
            loss_histories,
            forecasts,
        });
    }
    Ok(ExperimentResult {
        config: config.clone(),
        runs,
    })
}

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

fn mark_incomplete(dir: &Path, err: &Error) {
    if fs::create_dir_all(dir).is_ok() {
        let _ = fs::write(dir.join(INCOMPLETE_MARKER), format!("{err}\n"));
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn reports_csv(reports: &[ForecastReport]) -> String {
    let mut s = String::from("series,model,f,rmse,da\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{},{}", r.series, r.model, r.steps, r.rmse, r.da);
    }
    s
}

pub fn stats_csv(comparisons: &[Comparison]) -> String {
    let mut s = String::from("comparison,u,n1,n2,p,method\n");
    for c in comparisons {
        let r = &c.result;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            c.label(),
            r.u_statistic,
            r.n1,
            r.n2,
            r.p_two_tailed,
            r.method.as_str()
        );
    }
    s
}

pub fn summary_csv(summaries: &[Summary]) -> String {
    let mut s = String::from("f,model,n,rmse_mean,rmse_sd,da_mean,da_sd\n");
    for m in summaries {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.steps, m.model, m.n, m.rmse_mean, m.rmse_sd, m.da_mean, m.da_sd
        );
    }
    s
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,mse\n");
    for (i, l) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, l);
    }
    s
}

/// Writes the output tree for a finished run into `dir`.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(INCOMPLETE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let all_reports: Vec<ForecastReport> = result.runs.iter().flat_map(|r| r.reports.clone()).collect();
    let all_cmp: Vec<Comparison> = result.runs.iter().flat_map(|r| r.comparisons.clone()).collect();
    let all_sum: Vec<Summary> = result.runs.iter().flat_map(|r| r.summaries.clone()).collect();
    write_file(&dir.join("reports.csv"), &reports_csv(&all_reports))?;
    write_file(&dir.join("stats.csv"), &stats_csv(&all_cmp))?;
    write_file(&dir.join("summary.csv"), &summary_csv(&all_sum))?;
    write_file(&dir.join("config.echo"), &result.config.to_settings())?;

    for run in &result.runs {
        for (kind, history) in &run.loss_histories {
            write_file(&dir.join(format!("loss_{kind}_f{}.csv", run.steps)), &loss_csv(history))?;
        }
        for model in &run.models {
            checkpoint::save(model, &dir.join(format!("model_{}_f{}.ckpt", model.kind(), run.steps)))?;
        }
        for fc in &run.forecasts {
            let n = result.config.plot_points.min(fc.actual.len());
            let stem = format!("plot_{}_f{}", fc.series, run.steps);
            emit_plot_data(result, &fc.series, run.steps, 0..n, &dir.join(format!("{stem}.csv")))?;
            if result.config.plot_svg {
                write_file(&dir.join(format!("{stem}.svg")), &plot_svg(fc, 0..n))?;
            }
        }
    }
    Ok(())
}

const PLOT_MODELS: [ModelKind; 3] = [ModelKind::Lstm, ModelKind::Gru, ModelKind::Baseline];

pub fn plot_csv(fc: &SeriesForecast, range: Range<usize>) -> String {
    let mut s = String::from("t,actual,lstm,gru,baseline\n");
    let end = range.end.min(fc.actual.len());
    for t in range.start.min(end)..end {
        let _ = write!(s, "{t},{}", fc.actual[t]);
        for m in PLOT_MODELS {
            match fc.predictions.get(&m) {
                Some(p) => {
                    let _ = write!(s, ",{}", p[t]);
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// Writes actual and predicted first-step values for test points `range` of
/// one series, in original units.
pub fn emit_plot_data(
    result: &ExperimentResult,
    series: &str,
    steps: usize,
    range: Range<usize>,
    path: &Path,
) -> Result<()> {
    let run = result
        .run(steps)
        .ok_or_else(|| Error::Config(format!("no results for f = {steps}")))?;
    let fc = run
        .forecasts
        .iter()
        .find(|f| f.series == series)
        .ok_or_else(|| Error::Config(format!("unknown series `{series}`")))?;
    write_file(path, &plot_csv(fc, range))
}

/// Minimal line chart of the same data as [`plot_csv`].
pub fn plot_svg(fc: &SeriesForecast, range: Range<usize>) -> String {
    let (w, h, pad) = (800.0, 400.0, 20.0);
    let end = range.end.min(fc.actual.len());
    let start = range.start.min(end);
    let mut lines: Vec<(&str, &[f64])> = vec![("black", &fc.actual[start..end])];
    for (m, color) in PLOT_MODELS.iter().zip(["tab:blue", "tab:orange", "gray"]) {
        if let Some(p) = fc.predictions.get(m) {
            lines.push((color, &p[start..end]));
        }
    }
    let all = lines.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = (end - start).max(2) as f64 - 1.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    for (color, values) in lines {
        let color = color.trim_start_matches("tab:");
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = pad + (w - 2.0 * pad) * i as f64 / n;
                let y = h - pad - (h - 2.0 * pad) * (v - lo) / span;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::profile(Profile::Quick);
        for (k, v) in [
            ("series", "2"),
            ("length", "200"),
            ("window", "10"),
            ("steps", "1,3"),
            ("test_samples", "40"),
            ("units", "4"),
            ("epochs", "10"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn settings_round_trip() {
        let mut c = tiny();
        c.set("gradient_clip", "2.5").unwrap();
        c.set("output_peephole", "previous").unwrap();
        c.set("dataset", "some/dir").unwrap();
        c.set("keep", "3032").unwrap();
        let mut back = ExperimentConfig::profile(Profile::Full);
        for (k, v) in parse_settings(&c.to_settings()).unwrap() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, c);
        assert!(c.clone().set("bogus", "1").is_err());
        assert!(c.clone().set("units", "many").is_err());
        assert!(parse_settings("no equals sign").is_err());
    }

    #[test]
    fn mean_sd_uses_sample_convention() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[3.0]), (3.0, 0.0));
    }

    #[test]
    fn tiny_run_is_deterministic_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let cfg = tiny();
        let result = run_experiment(&cfg, Some(&a)).unwrap();
        run_experiment_with(Execution::Sequential, &cfg, Some(&b)).unwrap();
        for name in [
            "reports.csv",
            "stats.csv",
            "summary.csv",
            "config.echo",
            "loss_lstm_f1.csv",
            "loss_gru_f3.csv",
            "model_lstm_f1.ckpt",
            "model_gru_f3.ckpt",
            "plot_series_1_f1.csv",
        ] {
            let x = fs::read(a.join(name)).unwrap_or_else(|_| panic!("{name} missing"));
            assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name} differs");
        }
        assert_eq!(result.runs.len(), 2);
        assert_eq!(result.runs[0].reports.len(), 6);
        assert_eq!(result.runs[0].comparisons.len(), 6);
        let loss = fs::read_to_string(a.join("loss_lstm_f1.csv")).unwrap();
        assert_eq!(loss.lines().count(), 11);
    }

    #[test]
    fn summary_recomputes_from_reports() {
        let mut cfg = tiny();
        cfg.set("models", "baseline").unwrap();
        cfg.set("series", "5").unwrap();
        let result = run_experiment(&cfg, None).unwrap();
        for run in &result.runs {
            let rmse: Vec<f64> = run.reports.iter().map(|r| r.rmse).collect();
            let (m, sd) = mean_sd(&rmse);
            assert!((run.summaries[0].rmse_mean - m).abs() < 1e-12);
            assert!((run.summaries[0].rmse_sd - sd).abs() < 1e-12);
            assert!(run.models.is_empty());
        }
    }

    #[test]
    fn excluding_the_training_series() {
        let mut cfg = tiny();
        cfg.set("models", "baseline").unwrap();
        cfg.set("series", "3").unwrap();
        cfg.set("exclude_train_series", "true").unwrap();
        let result = run_experiment(&cfg, None).unwrap();
        assert!(result.runs[0].reports.iter().all(|r| r.series != "series_1"));
        assert_eq!(result.runs[0].reports.len(), 2);
    }

    #[test]
    fn failures_mark_the_output_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.set("window", "500").unwrap();
        let err = run_experiment(&cfg, Some(dir.path())).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(dir.path().join(INCOMPLETE_MARKER).exists());
        assert!(!dir.path().join("reports.csv").exists());
    }

    #[test]
    fn plot_data_ranges() {
        let mut cfg = tiny();
        cfg.set("models", "baseline").unwrap();
        let result = run_experiment(&cfg, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        emit_plot_data(&result, "series_2", 1, 0..0, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "t,actual,lstm,gru,baseline\n");
        emit_plot_data(&result, "series_2", 1, 0..25, &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap().lines().count(), 26);
        assert!(emit_plot_data(&result, "nope", 1, 0..5, &p).is_err());
        let svg = plot_svg(&result.runs[0].forecasts[0], 0..25);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
