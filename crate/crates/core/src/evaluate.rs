//! K-fold splitting, leak-free standardization, regression metrics, outlier
//! flags, dataset summaries and the report/residual/summary exports.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetRow;
use crate::featurize::FEATURE_NAMES;

pub const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot split {n} rows into {k} folds")]
    TooFewRows { n: usize, k: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("need at least {0} values")]
    TooFewValues(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Toml(#[from] toml::ser::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded shuffle of `0..n`, then `k` contiguous validation blocks whose sizes differ by at most one.
/// Index lists are returned sorted.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>, EvalError> {
    if k == 0 || n < k {
        return Err(EvalError::TooFewRows { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut validation = order[start..start + size].to_vec();
        let mut train: Vec<usize> = order[..start]
            .iter()
            .chain(&order[start + size..])
            .copied()
            .collect();
        validation.sort_unstable();
        train.sort_unstable();
        folds.push(Fold { train, validation });
        start += size;
    }
    Ok(folds)
}

/// Per-column mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_scaler<R: AsRef<[f64]>>(rows: &[R]) -> Result<ScalerParams, EvalError> {
    let first = rows.first().ok_or(EvalError::Empty)?.as_ref().len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; first];
    for r in rows {
        let r = r.as_ref();
        if r.len() != first {
            return Err(EvalError::Length(first, r.len()));
        }
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; first];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r.as_ref()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .map(|s| (s / n).sqrt().max(SIGMA_FLOOR))
        .collect();
    Ok(ScalerParams { mean, std })
}

/// Single-column scaler.
pub fn fit_scaler_1d(values: &[f64]) -> Result<ScalerParams, EvalError> {
    let rows: Vec<[f64; 1]> = values.iter().map(|v| [*v]).collect();
    fit_scaler(&rows)
}

impl ScalerParams {
    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    pub fn apply_value(&self, col: usize, x: f64) -> f64 {
        (x - self.mean[col]) / self.std[col]
    }

    pub fn invert_value(&self, col: usize, z: f64) -> f64 {
        z * self.std[col] + self.mean[col]
    }
}

/// `r2` is `None` when the actuals are constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub r2: Option<f64>,
}

pub fn metrics(pred: &[f64], actual: &[f64]) -> Result<Metrics, EvalError> {
    if pred.len() != actual.len() {
        return Err(EvalError::Length(pred.len(), actual.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = pred.len() as f64;
    let mse = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (a - p) * (a - p))
        .sum::<f64>()
        / n;
    let mae = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (a - p).abs())
        .sum::<f64>()
        / n;
    let mean = actual.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean) * (a - mean)).sum();
    let ss_res: f64 = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (a - p) * (a - p))
        .sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - ss_res / ss_tot);
    Ok(Metrics { mse, mae, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
    pub predictions: Vec<f64>,
    pub actuals: Vec<f64>,
    pub residuals: Vec<f64>,
    pub metrics: Metrics,
    /// Metrics after standardizing predictions and actuals with the target scaler.
    pub scaled_metrics: Metrics,
    pub feature_scaler: Option<ScalerParams>,
    pub target_scaler: ScalerParams,
}

impl FoldReport {
    pub fn new(
        fold: usize,
        split: &Fold,
        predictions: Vec<f64>,
        actuals: Vec<f64>,
        feature_scaler: Option<ScalerParams>,
        target_scaler: ScalerParams,
    ) -> Result<Self, EvalError> {
        let metrics = metrics(&predictions, &actuals)?;
        let scale = |v: &[f64]| {
            v.iter()
                .map(|x| target_scaler.apply_value(0, *x))
                .collect::<Vec<_>>()
        };
        let scaled_metrics = self::metrics(&scale(&predictions), &scale(&actuals))?;
        let residuals = actuals
            .iter()
            .zip(&predictions)
            .map(|(a, p)| a - p)
            .collect();
        Ok(Self {
            fold,
            train_indices: split.train.clone(),
            validation_indices: split.validation.clone(),
            predictions,
            actuals,
            residuals,
            metrics,
            scaled_metrics,
            feature_scaler,
            target_scaler,
        })
    }
}

/// Fits a fold's scalers from its training rows: features (optional) and target.
pub fn fold_scalers(
    rows: &[DatasetRow],
    fold: &Fold,
    with_features: bool,
) -> Result<(Option<ScalerParams>, ScalerParams), EvalError> {
    let feature = if with_features {
        let train: Vec<&[f64]> = fold
            .train
            .iter()
            .map(|&i| rows[i].features.as_slice())
            .collect();
        Some(fit_scaler(&train)?)
    } else {
        None
    };
    let targets: Vec<f64> = fold.train.iter().map(|&i| rows[i].target).collect();
    Ok((feature, fit_scaler_1d(&targets)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mse: f64,
    pub mae: f64,
    /// Mean or best over folds with a defined R².
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub row_index: usize,
    pub fold: usize,
    pub actual: f64,
    pub predicted: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: MetricSummary,
    pub best: MetricSummary,
    pub mean_scaled: MetricSummary,
    pub best_scaled: MetricSummary,
    pub rows: Vec<ResidualRow>,
}

fn summarize(ms: &[Metrics]) -> (MetricSummary, MetricSummary) {
    let n = ms.len() as f64;
    let r2s: Vec<f64> = ms.iter().filter_map(|m| m.r2).collect();
    let mean = MetricSummary {
        mse: ms.iter().map(|m| m.mse).sum::<f64>() / n,
        mae: ms.iter().map(|m| m.mae).sum::<f64>() / n,
        r2: (!r2s.is_empty()).then(|| r2s.iter().sum::<f64>() / r2s.len() as f64),
    };
    let best = MetricSummary {
        mse: ms.iter().map(|m| m.mse).fold(f64::INFINITY, f64::min),
        mae: ms.iter().map(|m| m.mae).fold(f64::INFINITY, f64::min),
        r2: r2s.iter().copied().reduce(f64::max),
    };
    (mean, best)
}

pub fn aggregate(reports: &[FoldReport]) -> Result<Aggregate, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let orig: Vec<Metrics> = reports.iter().map(|r| r.metrics).collect();
    let scaled: Vec<Metrics> = reports.iter().map(|r| r.scaled_metrics).collect();
    let (mean, best) = summarize(&orig);
    let (mean_scaled, best_scaled) = summarize(&scaled);
    let mut rows: Vec<ResidualRow> = reports
        .iter()
        .flat_map(|r| {
            r.validation_indices
                .iter()
                .enumerate()
                .map(move |(k, &row_index)| ResidualRow {
                    row_index,
                    fold: r.fold,
                    actual: r.actuals[k],
                    predicted: r.predictions[k],
                    residual: r.residuals[k],
                })
        })
        .collect();
    rows.sort_by_key(|r| r.row_index);
    Ok(Aggregate {
        mean,
        best,
        mean_scaled,
        best_scaled,
        rows,
    })
}

#[derive(Serialize)]
struct ReportFold {
    fold: usize,
    n_train: usize,
    n_validation: usize,
    original: Metrics,
    scaled: Metrics,
}

#[derive(Serialize)]
struct ReportFile<'a> {
    model: &'a str,
    folds: Vec<ReportFold>,
    mean: MetricSummary,
    best: MetricSummary,
    mean_scaled: MetricSummary,
    best_scaled: MetricSummary,
}

/// TOML report with per-fold and aggregate metrics on both scales.
/// An undefined R² is omitted from its table.
pub fn write_report<W: Write>(
    mut out: W,
    model: &str,
    reports: &[FoldReport],
) -> Result<(), EvalError> {
    let agg = aggregate(reports)?;
    let file = ReportFile {
        model,
        folds: reports
            .iter()
            .map(|r| ReportFold {
                fold: r.fold,
                n_train: r.train_indices.len(),
                n_validation: r.validation_indices.len(),
                original: r.metrics,
                scaled: r.scaled_metrics,
            })
            .collect(),
        mean: agg.mean,
        best: agg.best,
        mean_scaled: agg.mean_scaled,
        best_scaled: agg.best_scaled,
    };
    out.write_all(toml::to_string(&file)?.as_bytes())?;
    Ok(())
}

/// `row_index,fold,actual,predicted,residual`, ordered by row index.
pub fn write_residuals<W: Write>(out: W, reports: &[FoldReport]) -> Result<(), EvalError> {
    let agg = aggregate(reports)?;
    let mut w = csv::Writer::from_writer(out);
    for r in &agg.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierReport {
    /// `(index, z)` with `|z| > threshold`, sorted by `|z|` descending.
    pub flagged: Vec<(usize, f64)>,
    pub z_scores: Vec<f64>,
    /// Set when every value is equal and no z-score exists.
    pub constant_input: bool,
}

pub fn zscore_outliers(values: &[f64], threshold: f64) -> Result<OutlierReport, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewValues(2));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Ok(OutlierReport {
            flagged: Vec::new(),
            z_scores: vec![0.0; values.len()],
            constant_input: true,
        });
    }
    let z_scores: Vec<f64> = values.iter().map(|v| (v - mean) / std).collect();
    let mut flagged: Vec<(usize, f64)> = z_scores
        .iter()
        .enumerate()
        .filter(|(_, z)| z.abs() > threshold)
        .map(|(i, z)| (i, *z))
        .collect();
    flagged.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    Ok(OutlierReport {
        flagged,
        z_scores,
        constant_input: false,
    })
}

/// Pearson correlation; `None` when either column is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Option<f64>, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Length(x.len(), y.len()));
    }
    if x.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some(sxy / (sxx * syy).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width bins over `[min, max]`; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let k = if width > 0.0 {
            (((v - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin {
            lower: lo + width * k as f64,
            upper: if k + 1 == bins {
                hi
            } else {
                lo + width * (k + 1) as f64
            },
            count,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub element_totals: BTreeMap<String, f64>,
    pub element_count_histogram: BTreeMap<usize, usize>,
    pub target_histogram: Vec<HistogramBin>,
    /// Feature name and Pearson r with the target (`None` if undefined).
    pub correlations: Vec<(String, Option<f64>)>,
}

pub fn dataset_summary(rows: &[DatasetRow], bins: usize) -> Result<DatasetSummary, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut element_totals = BTreeMap::new();
    let mut element_count_histogram = BTreeMap::new();
    for r in rows {
        for (sym, coef) in r.composition.entries() {
            *element_totals
                .entry(sym.as_str().to_string())
                .or_insert(0.0) += coef;
        }
        *element_count_histogram
            .entry(r.composition.len())
            .or_insert(0) += 1;
    }
    let targets: Vec<f64> = rows.iter().map(|r| r.target).collect();
    let mut correlations = Vec::with_capacity(FEATURE_NAMES.len());
    for (j, name) in FEATURE_NAMES.iter().enumerate() {
        let col: Vec<f64> = rows.iter().map(|r| r.features[j]).collect();
        correlations.push((name.to_string(), pearson(&col, &targets)?));
    }
    Ok(DatasetSummary {
        element_totals,
        element_count_histogram,
        target_histogram: histogram(&targets, bins),
        correlations,
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `element_totals.csv`, `element_counts.csv`, `target_histogram.csv` and `correlations.csv`.
pub fn write_summary(dir: &std::path::Path, s: &DatasetSummary) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(dir.join("element_totals.csv"))?;
    w.write_record(["element", "total"])?;
    for (e, t) in &s.element_totals {
        w.write_record([e.clone(), t.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("element_counts.csv"))?;
    w.write_record(["element_count", "rows"])?;
    for (k, n) in &s.element_count_histogram {
        w.write_record([k.to_string(), n.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("target_histogram.csv"))?;
    for b in &s.target_histogram {
        w.serialize(b)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("correlations.csv"))?;
    w.write_record(["feature", "pearson_r", "defined"])?;
    for (name, r) in &s.correlations {
        w.write_record([name.clone(), opt_cell(*r), r.is_some().to_string()])?;
    }
    w.flush()?;
    Ok(())
}
