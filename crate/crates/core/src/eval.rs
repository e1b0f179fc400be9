//! Gaze metrics and evaluation: RMSE (2n-denominator form) and mean Euclidean
//! distance, constant naive baselines, millimeter conversion, model
//! evaluation over a dataset, run aggregation, and an auditor that decides
//! which metric a reported number was actually computed with.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::model::GazeModel;
use crate::tensor::{no_grad, Element, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction set is empty")]
    EmptySet,
    #[error("truth and prediction lengths differ: {truth} vs {pred}")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("non-finite coordinate at index {0}")]
    NonFinite(usize),
    #[error("aggregation needs at least 2 reports, got {0}")]
    TooFewRuns(usize),
    #[error("cannot aggregate reports with mixed units")]
    MixedUnits,
    #[error("units_per_mm must be positive, got {0}")]
    BadUnitScale(f64),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("naive {0} predictor needs a non-empty training set")]
    EmptyTrainingGaze(&'static str),
    #[error("malformed prediction csv: {0}")]
    MalformedCsv(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    Native,
    Millimeters,
}

impl std::fmt::Display for Units {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Units::Native => write!(f, "native"),
            Units::Millimeters => write!(f, "mm"),
        }
    }
}

/// Conversion from native screen units to millimeters (display-geometry
/// dependent; never applied implicitly).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitScale {
    pub units_per_mm: f64,
}

impl UnitScale {
    pub fn new(units_per_mm: f64) -> Result<Self, EvalError> {
        if !(units_per_mm > 0.0) {
            return Err(EvalError::BadUnitScale(units_per_mm));
        }
        Ok(UnitScale { units_per_mm })
    }
}

/// Paired ground-truth and predicted gaze coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub truth: Vec<[f64; 2]>,
    pub pred: Vec<[f64; 2]>,
    pub units: Units,
}

impl PredictionSet {
    pub fn new(truth: Vec<[f64; 2]>, pred: Vec<[f64; 2]>, units: Units) -> Result<Self, EvalError> {
        if truth.len() != pred.len() {
            return Err(EvalError::LengthMismatch {
                truth: truth.len(),
                pred: pred.len(),
            });
        }
        if truth.is_empty() {
            return Err(EvalError::EmptySet);
        }
        for (i, (t, p)) in truth.iter().zip(&pred).enumerate() {
            if !(t[0].is_finite() && t[1].is_finite() && p[0].is_finite() && p[1].is_finite()) {
                return Err(EvalError::NonFinite(i));
            }
        }
        Ok(PredictionSet { truth, pred, units })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Root mean-squared error with per-coordinate (2n) normalization:
    /// `sqrt(sum((dx^2 + dy^2)) / (2n))`.
    pub fn rmse(&self) -> f64 {
        let sum: f64 = self
            .truth
            .iter()
            .zip(&self.pred)
            .map(|(t, p)| {
                let dx = t[0] - p[0];
                let dy = t[1] - p[1];
                dx * dx + dy * dy
            })
            .sum();
        (sum / (2.0 * self.len() as f64)).sqrt()
    }

    /// Mean Euclidean distance: `mean(sqrt(dx^2 + dy^2))`.
    pub fn med(&self) -> f64 {
        let sum: f64 = self
            .truth
            .iter()
            .zip(&self.pred)
            .map(|(t, p)| {
                let dx = t[0] - p[0];
                let dy = t[1] - p[1];
                (dx * dx + dy * dy).sqrt()
            })
            .sum();
        sum / self.len() as f64
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            rmse: self.rmse(),
            med: self.med(),
            n: self.len(),
            units: self.units,
            mean_std: None,
        }
    }

    /// `index,x_true,y_true,x_pred,y_pred` rows; floats use shortest
    /// round-trip formatting, so emission is byte-deterministic.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("index,x_true,y_true,x_pred,y_pred\n");
        for (i, (t, p)) in self.truth.iter().zip(&self.pred).enumerate() {
            out.push_str(&format!("{i},{},{},{},{}\n", t[0], t[1], p[0], p[1]));
        }
        out
    }

    pub fn from_csv_str(text: &str, units: Units) -> Result<Self, EvalError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| EvalError::MalformedCsv("empty file".into()))?;
        if header.trim() != "index,x_true,y_true,x_pred,y_pred" {
            return Err(EvalError::MalformedCsv(format!("unexpected header {header:?}")));
        }
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(EvalError::MalformedCsv(format!(
                    "line {}: expected 5 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64, EvalError> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| EvalError::MalformedCsv(format!("line {}: bad float {s:?}", lineno + 2)))
            };
            truth.push([parse(fields[1])?, parse(fields[2])?]);
            pred.push([parse(fields[3])?, parse(fields[4])?]);
        }
        PredictionSet::new(truth, pred, units)
    }
}

/// Per-run metric summary (serialized as the report JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub med: f64,
    pub n: usize,
    pub units: Units,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_std: Option<Aggregate>,
}

/// Mean and sample standard deviation of both metrics across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub med_mean: f64,
    pub med_std: f64,
}

pub fn aggregate_runs(reports: &[MetricReport]) -> Result<Aggregate, EvalError> {
    if reports.len() < 2 {
        return Err(EvalError::TooFewRuns(reports.len()));
    }
    if reports.iter().any(|r| r.units != reports[0].units) {
        return Err(EvalError::MixedUnits);
    }
    let mean_std = |values: Vec<f64>| -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (mean, var.sqrt())
    };
    let (rmse_mean, rmse_std) = mean_std(reports.iter().map(|r| r.rmse).collect());
    let (med_mean, med_std) = mean_std(reports.iter().map(|r| r.med).collect());
    Ok(Aggregate {
        runs: reports.len(),
        rmse_mean,
        rmse_std,
        med_mean,
        med_std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaiveKind {
    /// Screen center (needs the screen dimensions).
    Center,
    /// Coordinate-wise mean of the training gaze.
    Mean,
    /// Coordinate-wise median (even counts average the middle two).
    Median,
}

/// The constant prediction of a naive baseline.
pub fn naive_predictor(
    kind: NaiveKind,
    train_gaze: &[[f64; 2]],
    screen: (f64, f64),
) -> Result<[f64; 2], EvalError> {
    match kind {
        NaiveKind::Center => Ok([screen.0 / 2.0, screen.1 / 2.0]),
        NaiveKind::Mean => {
            if train_gaze.is_empty() {
                return Err(EvalError::EmptyTrainingGaze("mean"));
            }
            let n = train_gaze.len() as f64;
            Ok([
                train_gaze.iter().map(|g| g[0]).sum::<f64>() / n,
                train_gaze.iter().map(|g| g[1]).sum::<f64>() / n,
            ])
        }
        NaiveKind::Median => {
            if train_gaze.is_empty() {
                return Err(EvalError::EmptyTrainingGaze("median"));
            }
            let med = |mut v: Vec<f64>| -> f64 {
                v.sort_by(|a, b| a.partial_cmp(b).expect("finite gaze"));
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    (v[n / 2 - 1] + v[n / 2]) / 2.0
                }
            };
            Ok([
                med(train_gaze.iter().map(|g| g[0]).collect()),
                med(train_gaze.iter().map(|g| g[1]).collect()),
            ])
        }
    }
}

/// Constant-prediction set against a dataset's gaze targets.
pub fn constant_prediction_set(
    ds: &Dataset,
    constant: [f64; 2],
    units: Units,
) -> Result<PredictionSet, EvalError> {
    let truth = ds.all_gaze();
    let pred = vec![constant; truth.len()];
    PredictionSet::new(truth, pred, units)
}

const EVAL_BATCH: usize = 64;

/// Runs the model (eval mode, no tape) over the dataset in batches of 64 and
/// computes both metrics; when `scale` is given, coordinates are divided by
/// `units_per_mm` before the metrics so the report is in millimeters.
pub fn evaluate<T: Element>(
    model: &GazeModel<T>,
    ds: &Dataset,
    scale: Option<UnitScale>,
) -> Result<(MetricReport, PredictionSet), EvalError> {
    if ds.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let was_training = model.is_training();
    model.set_training(false);
    let mut truth = Vec::with_capacity(ds.len());
    let mut pred = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    let result = (|| -> Result<(), EvalError> {
        for batch in indices.chunks(EVAL_BATCH) {
            let (x32, _) = ds.batch_tensors(batch);
            let x = x32.cast::<T>();
            let out = no_grad(|| model.forward(&x))?;
            let od = out.data();
            for (row, &i) in batch.iter().enumerate() {
                let g = ds.gaze_sample(i);
                truth.push([g[0] as f64, g[1] as f64]);
                pred.push([od[2 * row].to_f64(), od[2 * row + 1].to_f64()]);
            }
        }
        Ok(())
    })();
    model.set_training(was_training);
    result?;

    let units = match scale {
        Some(s) => {
            if !(s.units_per_mm > 0.0) {
                return Err(EvalError::BadUnitScale(s.units_per_mm));
            }
            for v in truth.iter_mut().chain(pred.iter_mut()) {
                v[0] /= s.units_per_mm;
                v[1] /= s.units_per_mm;
            }
            Units::Millimeters
        }
        None => Units::Native,
    };
    let ps = PredictionSet::new(truth, pred, units)?;
    Ok((ps.report(), ps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetricMatch {
    Rmse,
    Med,
    Both,
    Neither,
}

impl std::fmt::Display for MetricMatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricMatch::Rmse => write!(f, "RMSE"),
            MetricMatch::Med => write!(f, "MED"),
            MetricMatch::Both => write!(f, "BOTH"),
            MetricMatch::Neither => write!(f, "NEITHER"),
        }
    }
}

/// Decides which metric a reported value was computed with, within a relative
/// tolerance. Returns `Both` when the metrics coincide within tolerance
/// rather than guessing.
pub fn audit_metric(
    ps: &PredictionSet,
    reported_value: f64,
    rel_tol: f64,
) -> Result<MetricMatch, EvalError> {
    if !(rel_tol > 0.0) {
        return Err(EvalError::BadTolerance(rel_tol));
    }
    let close = |metric: f64| -> bool {
        (metric - reported_value).abs() <= rel_tol * metric.abs().max(f64::MIN_POSITIVE)
    };
    let rmse_match = close(ps.rmse());
    let med_match = close(ps.med());
    Ok(match (rmse_match, med_match) {
        (true, true) => MetricMatch::Both,
        (true, false) => MetricMatch::Rmse,
        (false, true) => MetricMatch::Med,
        (false, false) => MetricMatch::Neither,
    })
}
