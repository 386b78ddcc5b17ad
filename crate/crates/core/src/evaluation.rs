//! Forecast metrics (RMSE, directional accuracy), the persistence baseline,
//! test-set evaluation and the two-tailed Mann-Whitney U test.

use std::fmt;
use std::str::FromStr;

use statrs::function::erf::erfc;

use crate::cells::CellKind;
use crate::dataprep::WindowedDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::par::Execution;
use crate::training::{mse, TrainedModel};

pub fn rmse(actual: &Matrix, predicted: &Matrix) -> Result<f64> {
    Ok(mse(actual, predicted)?.sqrt())
}

/// Fraction of steps whose predicted move has the same sign as the actual
/// move, counting a zero product as agreement. The first step's moves are
/// measured from the two anchors.
pub fn directional_accuracy(
    actual: &[f64],
    predicted: &[f64],
    anchor_actual: f64,
    anchor_predicted: f64,
) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(Error::shape(
            "directional_accuracy",
            (actual.len(), 1),
            (predicted.len(), 1),
        ));
    }
    if actual.is_empty() {
        return Err(Error::Precondition("directional accuracy of an empty sequence".into()));
    }
    let mut prev_a = anchor_actual;
    let mut prev_p = anchor_predicted;
    let mut hits = 0usize;
    for (&a, &p) in actual.iter().zip(predicted) {
        if (a - prev_a) * (p - prev_p) >= 0.0 {
            hits += 1;
        }
        prev_a = a;
        prev_p = p;
    }
    Ok(hits as f64 / actual.len() as f64)
}

/// Repeats the last value of the window `steps` times.
pub fn baseline_forecast(window: &[f64], steps: usize) -> Vec<f64> {
    let last = *window.last().expect("baseline needs a non-empty window");
    vec![last; steps]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelKind {
    Lstm,
    Gru,
    Baseline,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Lstm => "LSTM",
            ModelKind::Gru => "GRU",
            ModelKind::Baseline => "Baseline",
        }
    }

    pub fn cell(self) -> Option<CellKind> {
        match self {
            ModelKind::Lstm => Some(CellKind::Lstm),
            ModelKind::Gru => Some(CellKind::Gru),
            ModelKind::Baseline => None,
        }
    }
}

impl From<CellKind> for ModelKind {
    fn from(k: CellKind) -> Self {
        match k {
            CellKind::Lstm => ModelKind::Lstm,
            CellKind::Gru => ModelKind::Gru,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lstm" => Ok(ModelKind::Lstm),
            "gru" => Ok(ModelKind::Gru),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

/// Anything that maps an input window to an `steps()`-long forecast.
pub trait Forecaster: Sync {
    fn kind(&self) -> ModelKind;
    fn steps(&self) -> usize;
    /// Required window length, if the model has one.
    fn window(&self) -> Option<usize>;
    fn forecast(&self, window: &[f64]) -> Result<Vec<f64>>;
}

/// Persistence forecaster.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Baseline {
    pub steps: usize,
}

impl Forecaster for Baseline {
    fn kind(&self) -> ModelKind {
        ModelKind::Baseline
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn window(&self) -> Option<usize> {
        None
    }

    fn forecast(&self, window: &[f64]) -> Result<Vec<f64>> {
        if window.is_empty() {
            return Err(Error::Precondition("baseline needs a non-empty window".into()));
        }
        Ok(baseline_forecast(window, self.steps))
    }
}

impl Forecaster for TrainedModel {
    fn kind(&self) -> ModelKind {
        self.network.kind().into()
    }

    fn steps(&self) -> usize {
        self.network.steps()
    }

    fn window(&self) -> Option<usize> {
        Some(self.window)
    }

    fn forecast(&self, window: &[f64]) -> Result<Vec<f64>> {
        self.predict(window)
    }
}

fn check_compatible(model: &dyn Forecaster, dataset: &WindowedDataset) -> Result<()> {
    if model.steps() != dataset.steps {
        return Err(Error::Config(format!(
            "{} forecasts {} steps but dataset `{}` has f = {}",
            model.kind(),
            model.steps(),
            dataset.name,
            dataset.steps
        )));
    }
    if let Some(w) = model.window() {
        if w != dataset.window {
            return Err(Error::Config(format!(
                "{} expects w = {} but dataset `{}` has w = {}",
                model.kind(),
                w,
                dataset.name,
                dataset.window
            )));
        }
    }
    if dataset.test_rows() == 0 {
        return Err(Error::Precondition(format!("dataset `{}` has no test rows", dataset.name)));
    }
    Ok(())
}

/// Predictions for every test row, `test_rows × f`, in normalized units.
pub fn predict_test(model: &dyn Forecaster, dataset: &WindowedDataset, exec: Execution) -> Result<Matrix> {
    check_compatible(model, dataset)?;
    let rows = dataset.test_range();
    let preds = exec.map_range(rows.len(), |k| model.forecast(dataset.x.row(rows.start + k)));
    let preds: Vec<Vec<f64>> = preds.into_iter().collect::<Result<_>>()?;
    Matrix::from_rows(&preds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastReport {
    pub series: String,
    pub model: ModelKind,
    pub steps: usize,
    /// RMSE on normalized values.
    pub rmse: f64,
    pub da: f64,
    /// RMSE in the series' original units.
    pub rmse_denormalized: Option<f64>,
}

/// Multi-horizon directional accuracy over the test rows.
///
/// For each forecast step `h`, the `h`-step-ahead predictions of consecutive
/// test rows form one sequence that is scored against the matching actual
/// values; the results are averaged over `h`. The predicted sequence is
/// anchored at the first test row's last input value, the actual sequence at
/// the true value preceding its first element. With `f = 1` this is the
/// sequential accuracy over the test horizon.
pub fn test_directional_accuracy(dataset: &WindowedDataset, preds: &Matrix) -> Result<f64> {
    let range = dataset.test_range();
    if preds.shape() != (range.len(), dataset.steps) {
        return Err(Error::shape("test predictions", preds.shape(), (range.len(), dataset.steps)));
    }
    let first = range.start;
    let last_observed = *dataset.x.row(first).last().expect("w >= 1");
    let mut total = 0.0;
    for h in 0..dataset.steps {
        let actual: Vec<f64> = range.clone().map(|k| dataset.y.get(k, h)).collect();
        let predicted: Vec<f64> = (0..range.len()).map(|k| preds.get(k, h)).collect();
        let anchor_actual = if h == 0 {
            last_observed
        } else {
            dataset.y.get(first, h - 1)
        };
        total += directional_accuracy(&actual, &predicted, anchor_actual, last_observed)?;
    }
    Ok(total / dataset.steps as f64)
}

/// Scores precomputed test predictions.
pub fn evaluate_predictions(
    model: ModelKind,
    dataset: &WindowedDataset,
    preds: &Matrix,
) -> Result<ForecastReport> {
    let actual = dataset.y.slice_rows(dataset.test_range());
    let rmse_norm = rmse(&actual, preds)?;
    let da = test_directional_accuracy(dataset, preds)?;
    let denorm = |m: &Matrix| m.map(|x| dataset.norm.invert(x));
    let rmse_raw = rmse(&denorm(&actual), &denorm(preds))?;
    Ok(ForecastReport {
        series: dataset.name.clone(),
        model,
        steps: dataset.steps,
        rmse: rmse_norm,
        da,
        rmse_denormalized: Some(rmse_raw),
    })
}

/// Predicts every test row of `dataset` and scores the result.
pub fn evaluate_model(model: &dyn Forecaster, dataset: &WindowedDataset) -> Result<ForecastReport> {
    let preds = predict_test(model, dataset, Execution::default())?;
    evaluate_predictions(model.kind(), dataset, &preds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestMethod {
    Exact,
    NormalApproximation,
}

impl TestMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            TestMethod::Exact => "exact",
            TestMethod::NormalApproximation => "normal",
        }
    }
}

/// Outcome of a two-tailed Mann-Whitney U test. `u_statistic` is
/// `min(u_a, u_b)`; `u_a` counts pairs where sample a exceeds sample b
/// (ties count one half).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MannWhitneyResult {
    pub u_statistic: f64,
    pub u_a: f64,
    pub u_b: f64,
    pub n1: usize,
    pub n2: usize,
    pub p_two_tailed: f64,
    pub method: TestMethod,
}

/// Combined sample sizes up to this bound use the exact null distribution
/// when there are no ties.
pub const EXACT_MAX_TOTAL: usize = 25;

/// Midranks of `values` (1-based) plus the tie term `Σ (t³ - t)`.
fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

/// Number of orderings of `n1 + n2` distinct values giving each U in
/// `0..=n1*n2`, by the recurrence `c(m, n, u) = c(m-1, n, u-n) + c(m, n-1, u)`.
pub fn u_distribution(n1: usize, n2: usize) -> Vec<u64> {
    // table[m][n] holds the count vector for sizes (m, n)
    let mut table: Vec<Vec<Vec<u64>>> = vec![vec![Vec::new(); n2 + 1]; n1 + 1];
    for m in 0..=n1 {
        for n in 0..=n2 {
            let mut counts = vec![0u64; m * n + 1];
            if m == 0 || n == 0 {
                counts[0] = 1;
            } else {
                for (u, c) in table[m - 1][n].iter().enumerate() {
                    counts[u + n] += c;
                }
                for (u, c) in table[m][n - 1].iter().enumerate() {
                    counts[u] += c;
                }
            }
            table[m][n] = counts;
        }
    }
    std::mem::take(&mut table[n1][n2])
}

/// Exact two-tailed p-value for an integer statistic `u_min = min(U_a, U_b)`.
pub fn exact_two_tailed_p(u_min: f64, n1: usize, n2: usize) -> f64 {
    let dist = u_distribution(n1, n2);
    let total: u64 = dist.iter().sum();
    let upto = u_min.floor() as usize;
    let tail: u64 = dist.iter().take(upto + 1).sum();
    (2.0 * tail as f64 / total as f64).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
pub fn normal_two_tailed_p(u_a: f64, n1: usize, n2: usize, tie_term: f64) -> f64 {
    let (m, n) = (n1 as f64, n2 as f64);
    let total = m + n;
    let mean = m * n / 2.0;
    let var = m * n / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    if var.is_nan() || var <= 0.0 {
        return 1.0;
    }
    let z = ((u_a - mean).abs() - 0.5).max(0.0) / var.sqrt();
    // 2·(1 − Φ(z)) = erfc(z/√2)
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Two-tailed Mann-Whitney U test. Exact when there are no ties and
/// `n1 + n2 <= EXACT_MAX_TOTAL`, normal approximation otherwise.
pub fn mann_whitney_two_tailed(a: &[f64], b: &[f64]) -> Result<MannWhitneyResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Precondition("Mann-Whitney test needs two non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Mann-Whitney sample contains non-finite values".into()));
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, tie_term) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..n1].iter().sum();
    let u_a = rank_sum_a - (n1 * (n1 + 1)) as f64 / 2.0;
    let u_b = (n1 * n2) as f64 - u_a;
    let u_min = u_a.min(u_b);

    let (p, method) = if tie_term == 0.0 && n1 + n2 <= EXACT_MAX_TOTAL {
        (exact_two_tailed_p(u_min, n1, n2), TestMethod::Exact)
    } else {
        (normal_two_tailed_p(u_a, n1, n2, tie_term), TestMethod::NormalApproximation)
    };
    Ok(MannWhitneyResult {
        u_statistic: u_min,
        u_a,
        u_b,
        n1,
        n2,
        p_two_tailed: p,
        method,
    })
}
