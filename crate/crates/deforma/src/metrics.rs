//! M4 metric suite: sMAPE, MASE, the Naive2 reference forecaster and
//! per-series / aggregate OWA.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::learners::ForecastMatrix;

/// Per-series metric triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesErrors {
    pub smape: f64,
    pub mase: f64,
    pub owa: f64,
}

/// Per-series error contributions of each base learner (per-series OWA),
/// the targets of the fusion loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMatrix {
    pub learner_ids: Vec<String>,
    /// series id -> one per-learner error row, in `learner_ids` order.
    pub per_series: HashMap<String, Vec<f64>>,
    /// Fixed series order used for deterministic iteration and CSV output.
    pub series_order: Vec<String>,
}

impl ErrorMatrix {
    pub fn row(&self, id: &str) -> Option<&[f64]> {
        self.per_series.get(id).map(|v| v.as_slice())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec!["series_id".to_string()];
        header.extend(self.learner_ids.iter().cloned());
        writer.write_record(&header)?;
        for id in &self.series_order {
            let row = &self.per_series[id];
            let mut record = vec![id.clone()];
            record.extend(row.iter().map(|v| crate::data::format_value(*v)));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Symmetric MAPE in percent: mean of 200|a-f| / (|a|+|f|); a term with
/// zero denominator contributes 0.
pub fn smape(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    if actual.is_empty() || actual.len() != forecast.len() {
        return Err(Error::argument(format!(
            "smape length mismatch: {} vs {}",
            actual.len(),
            forecast.len()
        )));
    }
    let mut total = 0.0;
    for (a, f) in actual.iter().zip(forecast) {
        let denom = a.abs() + f.abs();
        if denom > 0.0 {
            total += 200.0 * (a - f).abs() / denom;
        }
    }
    Ok(total / actual.len() as f64)
}

/// In-sample one-step-ahead Naive2 mean absolute error, the MASE scale.
///
/// The series is deseasonalized with the classical multiplicative
/// decomposition (when the seasonality test fires), naive one-step
/// predictions are made on the adjusted series and re-seasonalized.
pub fn naive2_insample_mae(train: &[f64], seasonal_period: usize) -> Result<f64> {
    if train.len() < 2 {
        return Err(Error::argument("need at least 2 observations for in-sample MAE"));
    }
    let indices = seasonal_index_per_step(train, seasonal_period);
    let mut total = 0.0;
    for t in 1..train.len() {
        let adjusted_prev = train[t - 1] / indices[t - 1];
        let prediction = adjusted_prev * indices[t];
        total += (train[t] - prediction).abs();
    }
    Ok(total / (train.len() - 1) as f64)
}

/// Mean absolute scaled error: horizon MAE over the in-sample one-step
/// Naive2 MAE of the training series.
pub fn mase(train: &[f64], actual: &[f64], forecast: &[f64], seasonal_period: usize) -> Result<f64> {
    if actual.is_empty() || actual.len() != forecast.len() {
        return Err(Error::argument(format!(
            "mase length mismatch: {} vs {}",
            actual.len(),
            forecast.len()
        )));
    }
    let scale = naive2_insample_mae(train, seasonal_period)?;
    if scale <= 0.0 {
        return Err(Error::Degenerate {
            id: String::new(),
            reason: "zero in-sample Naive2 MAE".to_string(),
        });
    }
    let mae: f64 = actual
        .iter()
        .zip(forecast)
        .map(|(a, f)| (a - f).abs())
        .sum::<f64>()
        / actual.len() as f64;
    Ok(mae / scale)
}

/// Autocorrelation function at lags 1..=max_lag (M-competition form:
/// shared mean, denominator = total sum of squares).
pub fn autocorrelations(values: &[f64], max_lag: usize) -> Vec<f64> {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let denom: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let mut acf = Vec::with_capacity(max_lag);
    for lag in 1..=max_lag {
        if lag >= n || denom <= 0.0 {
            acf.push(0.0);
            continue;
        }
        let num: f64 = (lag..n)
            .map(|t| (values[t] - mean) * (values[t - lag] - mean))
            .sum();
        acf.push(num / denom);
    }
    acf
}

/// M4-convention seasonality test: |r_m| must exceed the 90% band
/// 1.645 * sqrt((1 + 2*sum_{i<m} r_i^2) / n).
pub fn is_seasonal(train: &[f64], seasonal_period: usize) -> bool {
    let m = seasonal_period;
    if m <= 1 || train.len() < 3 * m {
        return false;
    }
    let acf = autocorrelations(train, m);
    let sum_sq: f64 = acf[..m - 1].iter().map(|r| r * r).sum();
    let limit = 1.645 * ((1.0 + 2.0 * sum_sq) / train.len() as f64).sqrt();
    acf[m - 1].abs() > limit
}

/// Classical multiplicative seasonal indices (one per season position,
/// normalized to mean 1). Returns `None` when decomposition is not
/// applicable (non-seasonal, too short, or nonpositive values).
pub fn seasonal_indices(train: &[f64], seasonal_period: usize) -> Option<Vec<f64>> {
    let m = seasonal_period;
    if m <= 1 || !is_seasonal(train, m) {
        return None;
    }
    if train.iter().any(|&v| v <= 0.0) {
        log::warn!("nonpositive values; falling back to non-seasonal naive");
        return None;
    }
    let n = train.len();
    // Centered moving average of window m (2xm for even m).
    let mut trend = vec![f64::NAN; n];
    if m % 2 == 1 {
        let half = m / 2;
        for t in half..n - half {
            let window: f64 = train[t - half..=t + half].iter().sum();
            trend[t] = window / m as f64;
        }
    } else {
        let half = m / 2;
        for t in half..n - half {
            let mut window = 0.5 * train[t - half] + 0.5 * train[t + half];
            window += train[t - half + 1..t + half].iter().sum::<f64>();
            trend[t] = window / m as f64;
        }
    }
    // Average detrended ratios per season position.
    let mut sums = vec![0.0; m];
    let mut counts = vec![0usize; m];
    for t in 0..n {
        if trend[t].is_finite() && trend[t] > 0.0 {
            sums[t % m] += train[t] / trend[t];
            counts[t % m] += 1;
        }
    }
    if counts.iter().any(|&c| c == 0) {
        return None;
    }
    let mut indices: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let mean = indices.iter().sum::<f64>() / m as f64;
    if mean <= 0.0 {
        return None;
    }
    for idx in &mut indices {
        *idx /= mean;
    }
    Some(indices)
}

/// Seasonal index aligned to each in-sample step (all 1.0 when
/// non-seasonal).
fn seasonal_index_per_step(train: &[f64], seasonal_period: usize) -> Vec<f64> {
    match seasonal_indices(train, seasonal_period) {
        Some(indices) => (0..train.len())
            .map(|t| indices[t % seasonal_period])
            .collect(),
        None => vec![1.0; train.len()],
    }
}

/// Seasonal indices for the h future steps following the train series.
pub fn future_seasonal_indices(
    train_len: usize,
    indices: Option<&[f64]>,
    seasonal_period: usize,
    horizon: usize,
) -> Vec<f64> {
    match indices {
        Some(idx) => (0..horizon)
            .map(|h| idx[(train_len + h) % seasonal_period])
            .collect(),
        None => vec![1.0; horizon],
    }
}

/// Naive2: naive forecast on the seasonally adjusted series,
/// re-seasonalized over the horizon. Falls back to plain naive when the
/// seasonality test fails or the decomposition is inapplicable.
pub fn naive2_forecast(train: &[f64], seasonal_period: usize, horizon: usize) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::argument("naive2 needs at least one observation"));
    }
    if horizon == 0 {
        return Ok(Vec::new());
    }
    let indices = seasonal_indices(train, seasonal_period);
    let n = train.len();
    let last_adjusted = match &indices {
        Some(idx) => train[n - 1] / idx[(n - 1) % seasonal_period],
        None => train[n - 1],
    };
    let future = future_seasonal_indices(n, indices.as_deref(), seasonal_period, horizon);
    Ok(future.iter().map(|s| last_adjusted * s).collect())
}

/// Per-series OWA: half the sum of sMAPE and MASE ratios relative to
/// the Naive2 reference on the same split.
pub fn owa_per_series(method: (f64, f64), reference: (f64, f64)) -> Result<f64> {
    let (smape_m, mase_m) = method;
    let (smape_r, mase_r) = reference;
    if smape_r <= 0.0 || mase_r <= 0.0 {
        return Err(Error::Degenerate {
            id: String::new(),
            reason: "zero reference sMAPE or MASE".to_string(),
        });
    }
    Ok(0.5 * (smape_m / smape_r + mase_m / mase_r))
}

/// Aggregate OWA: the official M4 mean (metric means before ratios) and
/// the median of per-series OWA values.
pub fn aggregate_owa(per_series: &[(f64, f64)], reference: &[(f64, f64)]) -> Result<(f64, f64)> {
    if per_series.is_empty() || per_series.len() != reference.len() {
        return Err(Error::argument("aggregate_owa needs equal, nonempty inputs"));
    }
    let n = per_series.len() as f64;
    let mean_smape = per_series.iter().map(|e| e.0).sum::<f64>() / n;
    let mean_mase = per_series.iter().map(|e| e.1).sum::<f64>() / n;
    let ref_smape = reference.iter().map(|e| e.0).sum::<f64>() / n;
    let ref_mase = reference.iter().map(|e| e.1).sum::<f64>() / n;
    if ref_smape <= 0.0 || ref_mase <= 0.0 {
        return Err(Error::Degenerate {
            id: String::new(),
            reason: "zero aggregate reference sMAPE or MASE".to_string(),
        });
    }
    let mean_owa = 0.5 * (mean_smape / ref_smape + mean_mase / ref_mase);
    let mut owas: Vec<f64> = per_series
        .iter()
        .zip(reference)
        .map(|(m, r)| owa_per_series(*m, *r))
        .collect::<Result<_>>()?;
    owas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if owas.len() % 2 == 1 {
        owas[owas.len() / 2]
    } else {
        0.5 * (owas[owas.len() / 2 - 1] + owas[owas.len() / 2])
    };
    Ok((mean_owa, median))
}

/// Evaluates one forecast against a holdout: sMAPE, MASE and OWA
/// relative to Naive2 on the same split.
pub fn evaluate_forecast(
    train: &[f64],
    actual: &[f64],
    forecast: &[f64],
    seasonal_period: usize,
) -> Result<SeriesErrors> {
    let reference = naive2_forecast(train, seasonal_period, actual.len())?;
    let smape_m = smape(actual, forecast)?;
    let mase_m = mase(train, actual, forecast, seasonal_period)?;
    let smape_r = smape(actual, &reference)?;
    let mase_r = mase(train, actual, &reference, seasonal_period)?;
    let owa = owa_per_series((smape_m, mase_m), (smape_r, mase_r))?;
    Ok(SeriesErrors {
        smape: smape_m,
        mase: mase_m,
        owa,
    })
}

/// Materializes the per-series, per-learner OWA matrix used as fusion
/// loss targets. `truths` maps series id to the holdout actuals and
/// `trains` to the history the learners were fit on.
pub fn build_error_matrix(
    forecasts: &ForecastMatrix,
    truths: &HashMap<String, Vec<f64>>,
    trains: &HashMap<String, Vec<f64>>,
    seasonal_period: usize,
) -> Result<ErrorMatrix> {
    let mut per_series = HashMap::new();
    let mut series_order = Vec::new();
    for id in &forecasts.series_order {
        let rows = forecasts.rows.get(id).ok_or_else(|| Error::Load {
            learner: "<all>".to_string(),
            reason: format!("missing forecasts for series '{id}'"),
        })?;
        let truth = truths
            .get(id)
            .ok_or_else(|| Error::validation(id, "missing holdout truth"))?;
        let train = trains
            .get(id)
            .ok_or_else(|| Error::validation(id, "missing training history"))?;
        let mut row = Vec::with_capacity(forecasts.learner_ids.len());
        for (learner, forecast) in forecasts.learner_ids.iter().zip(rows) {
            let errors = evaluate_forecast(train, truth, forecast, seasonal_period)
                .map_err(|e| match e {
                    Error::Degenerate { reason, .. } => Error::Degenerate {
                        id: id.clone(),
                        reason,
                    },
                    other => Error::Load {
                        learner: learner.clone(),
                        reason: format!("series '{id}': {other}"),
                    },
                })?;
            row.push(errors.owa);
        }
        per_series.insert(id.clone(), row);
        series_order.push(id.clone());
    }
    Ok(ErrorMatrix {
        learner_ids: forecasts.learner_ids.clone(),
        per_series,
        series_order,
    })
}
