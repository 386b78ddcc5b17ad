//! Min-max normalization, sliding-window construction with a trailing test
//! partition, CSV ingestion, and synthetic dataset generators.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// A named univariate series with optional date labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
    pub dates: Option<Vec<String>>,
}

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Series {
            name: name.into(),
            values,
            dates: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Extremes used by min-max normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormRecord {
    pub v_min: f64,
    pub v_max: f64,
}

impl NormRecord {
    /// Extremes of `values`. Fails on empty, non-finite or constant input.
    pub fn fit(name: &str, values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Precondition(format!("series `{name}` is empty")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("series `{name}` contains non-finite values")));
        }
        let v_min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let v_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if v_max == v_min {
            return Err(Error::DegenerateSeries {
                name: name.to_string(),
                value: v_min,
            });
        }
        Ok(NormRecord { v_min, v_max })
    }

    pub fn span(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.v_min) / (self.v_max - self.v_min)
    }

    pub fn invert(&self, x: f64) -> f64 {
        x * (self.v_max - self.v_min) + self.v_min
    }
}

/// Scales the series to `[0, 1]` using its own minimum and maximum.
pub fn normalize(series: &Series) -> Result<(Series, NormRecord)> {
    let record = NormRecord::fit(&series.name, &series.values)?;
    Ok((apply_record(series, &record), record))
}

/// Normalizes with extremes taken from the first `prefix` values only; later
/// values may fall outside `[0, 1]`.
pub fn normalize_prefix(series: &Series, prefix: usize) -> Result<(Series, NormRecord)> {
    if prefix == 0 || prefix > series.len() {
        return Err(Error::Precondition(format!(
            "normalization prefix {prefix} outside 1..={}",
            series.len()
        )));
    }
    let record = NormRecord::fit(&series.name, &series.values[..prefix])?;
    Ok((apply_record(series, &record), record))
}

fn apply_record(series: &Series, record: &NormRecord) -> Series {
    Series {
        name: series.name.clone(),
        values: series.values.iter().map(|&v| record.apply(v)).collect(),
        dates: series.dates.clone(),
    }
}

pub fn denormalize(series: &Series, record: &NormRecord) -> Series {
    Series {
        name: series.name.clone(),
        values: series.values.iter().map(|&x| record.invert(x)).collect(),
        dates: series.dates.clone(),
    }
}

/// Window matrix `x` (rows × window) and target matrix `y` (rows × steps)
/// of one normalized series. The first `n_train` rows form the training
/// set; the rest are test rows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub name: String,
    pub x: Matrix,
    pub y: Matrix,
    pub n_train: usize,
    pub window: usize,
    pub steps: usize,
    pub norm: NormRecord,
}

impl WindowedDataset {
    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn test_rows(&self) -> usize {
        self.rows() - self.n_train
    }

    pub fn test_range(&self) -> std::ops::Range<usize> {
        self.n_train..self.rows()
    }
}

/// Builds the sliding windows of a normalized series.
///
/// Row `k` (0-based) holds `x[k..k+w]` and targets `x[k+w..k+w+f]`; there are
/// `Q - (w - 1 + f)` rows and `N = Q - test_s - w` of them train. Requires
/// `f < w < N < Q` and at least one test row.
pub fn make_windows(
    series: &Series,
    window: usize,
    steps: usize,
    test_samples: usize,
    norm: NormRecord,
) -> Result<WindowedDataset> {
    let q = series.len();
    if steps == 0 {
        return Err(Error::Config("forecast steps f must be at least 1".into()));
    }
    let n_train = q as i64 - test_samples as i64 - window as i64;
    if steps >= window {
        return Err(Error::Config(format!(
            "f < w violated: f = {steps}, w = {window}"
        )));
    }
    if window as i64 >= n_train {
        return Err(Error::Config(format!(
            "w < N violated: w = {window}, N = Q - test_s - w = {q} - {test_samples} - {window} = {n_train}"
        )));
    }
    let n_train = n_train as usize;
    if n_train >= q {
        return Err(Error::Config(format!("N < Q violated: N = {n_train}, Q = {q}")));
    }
    let rows = q - (window - 1 + steps);
    if n_train >= rows {
        return Err(Error::Config(format!(
            "no test windows: N = {n_train} but only {rows} windows (test_s = {test_samples} must be at least f = {steps})"
        )));
    }

    let v = &series.values;
    let mut x = Vec::with_capacity(rows * window);
    let mut y = Vec::with_capacity(rows * steps);
    for k in 0..rows {
        x.extend_from_slice(&v[k..k + window]);
        y.extend_from_slice(&v[k + window..k + window + steps]);
    }
    Ok(WindowedDataset {
        name: series.name.clone(),
        x: Matrix::new(rows, window, x)?,
        y: Matrix::new(rows, steps, y)?,
        n_train,
        window,
        steps,
        norm,
    })
}

/// Keeps the last `keep` values (and dates).
pub fn truncate_tail(series: &Series, keep: usize) -> Result<Series> {
    let len = series.len();
    if keep > len {
        return Err(Error::Precondition(format!(
            "cannot keep {keep} samples of `{}`, it has {len}",
            series.name
        )));
    }
    Ok(Series {
        name: series.name.clone(),
        values: series.values[len - keep..].to_vec(),
        dates: series.dates.as_ref().map(|d| d[len - keep..].to_vec()),
    })
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty()
        || ["null", "na", "n/a", "nan", "none", "-"]
            .iter()
            .any(|m| f.eq_ignore_ascii_case(m))
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .or_else(|| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name)))
}

/// Reads one column of a dated price CSV (comma separated, header first,
/// chronological rows). Rows whose value is missing are skipped.
pub fn load_csv(path: &Path, column: &str) -> Result<Series> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::ingest(path, e.to_string()))?
        .clone();
    let date_col = find_column(&headers, "Date")
        .ok_or_else(|| Error::ingest(path, "missing `Date` column"))?;
    let value_col = find_column(&headers, column)
        .ok_or_else(|| Error::ingest(path, format!("missing `{column}` column")))?;

    let mut values = Vec::new();
    let mut dates = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::ingest(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = record.get(value_col).unwrap_or("");
        if is_missing(field) {
            continue;
        }
        let value: f64 = field.trim().parse().map_err(|_| {
            Error::ingest(path, format!("row {line}: cannot parse `{field}` as a number"))
        })?;
        if !value.is_finite() {
            return Err(Error::ingest(path, format!("row {line}: non-finite value `{field}`")));
        }
        values.push(value);
        dates.push(record.get(date_col).unwrap_or("").trim().to_string());
    }
    if values.is_empty() {
        return Err(Error::ingest(path, format!("no usable `{column}` values")));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    Ok(Series {
        name,
        values,
        dates: Some(dates),
    })
}

/// Loads every `*.csv` in `dir`, ordered by file name.
pub fn load_csv_dir(dir: &Path, column: &str) -> Result<Vec<Series>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::ingest(dir, "directory contains no .csv files"));
    }
    paths.iter().map(|p| load_csv(p, column)).collect()
}

/// Writes series side by side: header `t,<name_1>,…`, one row per timestep,
/// values with 17 significant digits. All series must share one length.
pub fn write_wide_csv(path: &Path, series: &[Series]) -> Result<()> {
    let len = series.first().map_or(0, Series::len);
    if series.iter().any(|s| s.len() != len) {
        return Err(Error::Precondition("series lengths differ".into()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        write!(out, "t")?;
        for s in series {
            write!(out, ",{}", s.name)?;
        }
        writeln!(out)?;
        for t in 0..len {
            write!(out, "{t}")?;
            for s in series {
                write!(out, ",{:.16e}", s.values[t])?;
            }
            writeln!(out)?;
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Reads a file produced by [`write_wide_csv`].
pub fn read_wide_csv(path: &Path) -> Result<Vec<Series>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::ingest(path, e.to_string()))?
        .clone();
    if headers.get(0).map(str::trim) != Some("t") || headers.len() < 2 {
        return Err(Error::ingest(path, "expected header `t,<series>,...`"));
    }
    let mut series: Vec<Series> = headers
        .iter()
        .skip(1)
        .map(|h| Series::new(h.trim(), Vec::new()))
        .collect();
    for record in reader.records() {
        let record = record.map_err(|e| Error::ingest(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        for (s, field) in series.iter_mut().zip(record.iter().skip(1)) {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::ingest(path, format!("row {line}: cannot parse `{field}` as a number"))
            })?;
            s.values.push(v);
        }
    }
    if series.iter().any(Series::is_empty) {
        return Err(Error::ingest(path, "no data rows"));
    }
    Ok(series)
}

/// Parameters of the weekly-activity generator.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivitiesConfig {
    pub n_series: usize,
    pub length: usize,
    pub slope: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sd: f64,
    /// Per-series scale factors are uniform on `[scale_min, scale_max]`.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Series `i` is the base series rotated right by `i * rotation_step`.
    pub rotation_step: usize,
    /// Add noise after scaling instead of before.
    pub noise_after_scaling: bool,
}

impl Default for ActivitiesConfig {
    fn default() -> Self {
        ActivitiesConfig {
            n_series: 10,
            length: 3584,
            slope: 0.0001,
            noise_sd: 0.05,
            scale_min: 0.5,
            scale_max: 10.0,
            rotation_step: 1,
            noise_after_scaling: false,
        }
    }
}

/// Five high days followed by two low days.
pub const WEEK_PATTERN: [f64; 7] = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];

/// Generates the weekly-activity dataset. Per series the generator draws
/// the scale factor first, then one noise value per timestep.
pub fn generate_activities(config: &ActivitiesConfig, seed: u64) -> Result<Vec<Series>> {
    if config.n_series == 0 {
        return Err(Error::Precondition("n_series must be at least 1".into()));
    }
    if config.length < WEEK_PATTERN.len() {
        return Err(Error::Precondition(format!(
            "length must be at least {}, got {}",
            WEEK_PATTERN.len(),
            config.length
        )));
    }
    if config.scale_min.is_nan() || config.scale_max.is_nan() || config.scale_min > config.scale_max || config.noise_sd.is_nan() || config.noise_sd < 0.0 {
        return Err(Error::Precondition("invalid scale range or noise level".into()));
    }
    let len = config.length;
    let base: Vec<f64> = (0..len)
        .map(|t| WEEK_PATTERN[t % WEEK_PATTERN.len()] + config.slope * t as f64)
        .collect();

    let mut rng = Rng::new(seed);
    let series = (0..config.n_series)
        .map(|i| {
            let shift = (i * config.rotation_step) % len;
            let scale = rng.uniform(config.scale_min, config.scale_max);
            let values = (0..len)
                .map(|t| {
                    let b = base[(t + len - shift) % len];
                    let noise = config.noise_sd * rng.standard_normal();
                    if config.noise_after_scaling {
                        b * scale + noise
                    } else {
                        (b + noise) * scale
                    }
                })
                .collect();
            Series::new(format!("series_{}", i + 1), values)
        })
        .collect();
    Ok(series)
}

/// Gaussian random walks, a stand-in for daily closing prices.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomWalkConfig {
    pub n_series: usize,
    pub length: usize,
    pub start: f64,
    pub step_sd: f64,
}

impl Default for RandomWalkConfig {
    fn default() -> Self {
        RandomWalkConfig {
            n_series: 10,
            length: 3032,
            start: 100.0,
            step_sd: 1.0,
        }
    }
}

pub fn generate_random_walks(config: &RandomWalkConfig, seed: u64) -> Result<Vec<Series>> {
    if config.n_series == 0 || config.length < 2 {
        return Err(Error::Precondition("random walks need n_series >= 1 and length >= 2".into()));
    }
    let mut rng = Rng::new(seed);
    Ok((0..config.n_series)
        .map(|i| {
            let mut level = config.start;
            let values = (0..config.length)
                .map(|t| {
                    if t > 0 {
                        level += config.step_sd * rng.standard_normal();
                    }
                    level
                })
                .collect();
            Series::new(format!("walk_{}", i + 1), values)
        })
        .collect())
}
