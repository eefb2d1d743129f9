//! Heterogeneous base-forecaster pool: classical exponential-smoothing
//! family, Theta, Naive2, and a loader for externally precomputed
//! forecasts (ES-RNN, Auto-ARIMA competition files).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::metrics::{future_seasonal_indices, seasonal_indices};

/// Per-series matrix of base-learner forecasts (learners x horizon).
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastMatrix {
    pub learner_ids: Vec<String>,
    /// series id -> one forecast row per learner, in `learner_ids` order.
    pub rows: HashMap<String, Vec<Vec<f64>>>,
    pub series_order: Vec<String>,
}

impl ForecastMatrix {
    pub fn forecasts(&self, id: &str) -> Option<&[Vec<f64>]> {
        self.rows.get(id).map(|v| v.as_slice())
    }
}

/// Fitted exponential-smoothing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingParams {
    pub alpha: f64,
    pub beta: Option<f64>,
    pub phi: Option<f64>,
}

/// Where a learner's forecasts come from.
#[derive(Debug, Clone, PartialEq)]
pub enum LearnerSource {
    Ses,
    Holt,
    DampedHolt,
    Comb,
    Theta,
    Naive2,
    /// CSV of competition-submitted forecasts, rows (id, f1..fh).
    Precomputed(PathBuf),
}

impl LearnerSource {
    pub fn parse(spec: &str) -> Result<Self> {
        match spec {
            "ses" => Ok(LearnerSource::Ses),
            "holt" => Ok(LearnerSource::Holt),
            "damped" => Ok(LearnerSource::DampedHolt),
            "comb" => Ok(LearnerSource::Comb),
            "theta" => Ok(LearnerSource::Theta),
            "naive2" => Ok(LearnerSource::Naive2),
            other => {
                if let Some(path) = other.strip_prefix("file:") {
                    Ok(LearnerSource::Precomputed(PathBuf::from(path)))
                } else {
                    Err(Error::Config(format!("unknown learner source '{other}'")))
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Exponential smoothing
// ---------------------------------------------------------------------------

/// One-step in-sample SSE of SES with the given alpha.
fn ses_sse(train: &[f64], alpha: f64) -> f64 {
    let mut level = train[0];
    let mut sse = 0.0;
    for &y in &train[1..] {
        let err = y - level;
        sse += err * err;
        level = alpha * y + (1.0 - alpha) * level;
    }
    sse
}

fn ses_level(train: &[f64], alpha: f64) -> f64 {
    let mut level = train[0];
    for &y in &train[1..] {
        level = alpha * y + (1.0 - alpha) * level;
    }
    level
}

/// Coarse-then-refined 1D grid minimization over [lo, hi].
fn grid_search_1d(lo: f64, hi: f64, objective: impl Fn(f64) -> f64) -> f64 {
    let mut best = lo;
    let mut best_sse = f64::INFINITY;
    let coarse = ((hi - lo) / 0.05).round() as usize;
    for i in 0..=coarse {
        let x = lo + i as f64 * 0.05;
        let sse = objective(x);
        if sse < best_sse {
            best_sse = sse;
            best = x;
        }
    }
    let fine_lo = (best - 0.05).max(lo);
    let fine_hi = (best + 0.05).min(hi);
    let fine = ((fine_hi - fine_lo) / 0.01).round() as usize;
    for i in 0..=fine {
        let x = fine_lo + i as f64 * 0.01;
        let sse = objective(x);
        if sse < best_sse {
            best_sse = sse;
            best = x;
        }
    }
    best
}

/// Simple exponential smoothing: flat forecast at the final level,
/// alpha fit by one-step in-sample SSE grid search.
pub fn ses_forecast(train: &[f64], horizon: usize) -> Result<Vec<f64>> {
    let params = fit_ses(train)?;
    Ok(ses_forecast_with(train, horizon, params.alpha))
}

pub fn fit_ses(train: &[f64]) -> Result<SmoothingParams> {
    if train.len() < 2 {
        return Err(Error::argument("ses needs at least 2 observations"));
    }
    let alpha = grid_search_1d(0.0, 1.0, |a| ses_sse(train, a));
    Ok(SmoothingParams {
        alpha,
        beta: None,
        phi: None,
    })
}

pub fn ses_forecast_with(train: &[f64], horizon: usize, alpha: f64) -> Vec<f64> {
    vec![ses_level(train, alpha); horizon]
}

/// Initial trend: mean of the first min(4, n-1) first differences.
fn initial_trend(train: &[f64]) -> f64 {
    let steps = (train.len() - 1).min(4);
    (0..steps).map(|i| train[i + 1] - train[i]).sum::<f64>() / steps as f64
}

/// Holt recursions with damping phi (phi = 1 is plain Holt). Returns
/// (final level, final trend, one-step in-sample SSE).
fn holt_state(train: &[f64], alpha: f64, beta: f64, phi: f64) -> (f64, f64, f64) {
    let mut level = train[0];
    let mut trend = initial_trend(train);
    let mut sse = 0.0;
    for &y in &train[1..] {
        let damped_trend = phi * trend;
        let prediction = level + damped_trend;
        let err = y - prediction;
        sse += err * err;
        let new_level = alpha * y + (1.0 - alpha) * prediction;
        trend = beta * (new_level - level) + (1.0 - beta) * damped_trend;
        level = new_level;
    }
    (level, trend, sse)
}

/// h-step Holt forecast: level + (phi + phi^2 + ... + phi^h) * trend.
pub fn holt_forecast_with(train: &[f64], horizon: usize, alpha: f64, beta: f64, phi: f64) -> Vec<f64> {
    let (level, trend, _) = holt_state(train, alpha, beta, phi);
    let mut out = Vec::with_capacity(horizon);
    let mut damp_sum = 0.0;
    let mut damp = 1.0;
    for _ in 0..horizon {
        damp *= phi;
        damp_sum += damp;
        out.push(level + damp_sum * trend);
    }
    out
}

pub fn fit_holt(train: &[f64], damped: bool) -> Result<SmoothingParams> {
    if train.len() < 3 {
        return Err(Error::argument("holt needs at least 3 observations"));
    }
    // Coarse 0.05 grid over all parameters, then a 0.01 refinement
    // around the best cell.
    let phis: Vec<f64> = if damped {
        (1..=20).map(|i| i as f64 * 0.05).collect()
    } else {
        vec![1.0]
    };
    let coarse: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
    let mut best = (0.0, 0.0, 1.0);
    let mut best_sse = f64::INFINITY;
    for &alpha in &coarse {
        for &beta in &coarse {
            for &phi in &phis {
                let (_, _, sse) = holt_state(train, alpha, beta, phi);
                if sse < best_sse {
                    best_sse = sse;
                    best = (alpha, beta, phi);
                }
            }
        }
    }
    let refine = |center: f64, lo: f64, hi: f64| -> Vec<f64> {
        let start = (center - 0.05).max(lo);
        let end = (center + 0.05).min(hi);
        let steps = ((end - start) / 0.01).round() as usize;
        (0..=steps).map(|i| start + i as f64 * 0.01).collect()
    };
    let alphas = refine(best.0, 0.0, 1.0);
    let betas = refine(best.1, 0.0, 1.0);
    let phis = if damped {
        refine(best.2, 0.01, 1.0)
    } else {
        vec![1.0]
    };
    for &alpha in &alphas {
        for &beta in &betas {
            for &phi in &phis {
                let (_, _, sse) = holt_state(train, alpha, beta, phi);
                if sse < best_sse {
                    best_sse = sse;
                    best = (alpha, beta, phi);
                }
            }
        }
    }
    Ok(SmoothingParams {
        alpha: best.0,
        beta: Some(best.1),
        phi: damped.then_some(best.2),
    })
}

/// Holt linear-trend forecast, optionally phi-damped. Parameters fit by
/// grid search on one-step in-sample SSE.
pub fn holt_forecast(train: &[f64], horizon: usize, damped: bool) -> Result<Vec<f64>> {
    let params = fit_holt(train, damped)?;
    Ok(holt_forecast_with(
        train,
        horizon,
        params.alpha,
        params.beta.unwrap(),
        params.phi.unwrap_or(1.0),
    ))
}

// ---------------------------------------------------------------------------
// Seasonal adjustment wrapper
// ---------------------------------------------------------------------------

/// Applies a non-seasonal forecaster to the seasonally adjusted series
/// (Naive2-style decomposition) and re-seasonalizes the output.
fn forecast_deseasonalized(
    train: &[f64],
    horizon: usize,
    seasonal_period: usize,
    forecaster: impl Fn(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    let indices = seasonal_indices(train, seasonal_period);
    let adjusted: Vec<f64> = match &indices {
        Some(idx) => train
            .iter()
            .enumerate()
            .map(|(t, &y)| y / idx[t % seasonal_period])
            .collect(),
        None => train.to_vec(),
    };
    let flat = forecaster(&adjusted, horizon)?;
    let future = future_seasonal_indices(train.len(), indices.as_deref(), seasonal_period, horizon);
    Ok(flat.iter().zip(&future).map(|(f, s)| f * s).collect())
}

/// Comb: arithmetic mean of SES, Holt and damped-Holt forecasts, each on
/// the seasonally adjusted series.
pub fn comb_forecast(train: &[f64], horizon: usize, seasonal_period: usize) -> Result<Vec<f64>> {
    forecast_deseasonalized(train, horizon, seasonal_period, |adjusted, h| {
        let ses = ses_forecast(adjusted, h)?;
        let holt = holt_forecast(adjusted, h, false)?;
        let damped = holt_forecast(adjusted, h, true)?;
        Ok((0..h)
            .map(|t| (ses[t] + holt[t] + damped[t]) / 3.0)
            .collect())
    })
}

/// Ordinary least squares on (0..n-1, y): returns (intercept, slope).
fn linear_fit(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let t_mean = (values.len() - 1) as f64 / 2.0;
    let y_mean = values.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &y) in values.iter().enumerate() {
        let dt = t as f64 - t_mean;
        num += dt * (y - y_mean);
        den += dt * dt;
    }
    let slope = if den > 0.0 { num / den } else { 0.0 };
    (y_mean - slope * t_mean, slope)
}

/// Classic Theta(0,2): average of the extrapolated regression line
/// (theta 0) and an SES forecast of the curvature-doubled line
/// (theta 2), on the seasonally adjusted series.
pub fn theta_forecast(train: &[f64], horizon: usize, seasonal_period: usize) -> Result<Vec<f64>> {
    if train.len() < 4 {
        return Err(Error::argument("theta needs at least 4 observations"));
    }
    forecast_deseasonalized(train, horizon, seasonal_period, |adjusted, h| {
        let (intercept, slope) = linear_fit(adjusted);
        let n = adjusted.len();
        let theta2: Vec<f64> = adjusted
            .iter()
            .enumerate()
            .map(|(t, &y)| 2.0 * y - (intercept + slope * t as f64))
            .collect();
        let theta2_forecast = ses_forecast(&theta2, h)?;
        Ok((0..h)
            .map(|step| {
                let line = intercept + slope * (n + step) as f64;
                0.5 * (line + theta2_forecast[step])
            })
            .collect())
    })
}

/// Dispatches an internal learner on a raw training history.
pub fn internal_forecast(
    source: &LearnerSource,
    train: &[f64],
    horizon: usize,
    seasonal_period: usize,
) -> Result<Vec<f64>> {
    match source {
        LearnerSource::Ses => {
            forecast_deseasonalized(train, horizon, seasonal_period, |a, h| ses_forecast(a, h))
        }
        LearnerSource::Holt => forecast_deseasonalized(train, horizon, seasonal_period, |a, h| {
            holt_forecast(a, h, false)
        }),
        LearnerSource::DampedHolt => {
            forecast_deseasonalized(train, horizon, seasonal_period, |a, h| {
                holt_forecast(a, h, true)
            })
        }
        LearnerSource::Comb => comb_forecast(train, horizon, seasonal_period),
        LearnerSource::Theta => theta_forecast(train, horizon, seasonal_period),
        LearnerSource::Naive2 => crate::metrics::naive2_forecast(train, seasonal_period, horizon),
        LearnerSource::Precomputed(path) => Err(Error::Load {
            learner: path.display().to_string(),
            reason: "precomputed source cannot forecast internally".to_string(),
        }),
    }
}

// ---------------------------------------------------------------------------
// Precomputed forecasts and pooling
// ---------------------------------------------------------------------------

/// Loads precomputed forecasts from a CSV of (id, f1..fh) rows. Every
/// dataset series must be covered with exactly its horizon; surplus ids
/// are ignored with a logged count.
pub fn load_precomputed(
    learner_id: &str,
    csv_path: &Path,
    dataset: &[TimeSeries],
) -> Result<HashMap<String, Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(csv_path)
        .map_err(|e| Error::Load {
            learner: learner_id.to_string(),
            reason: format!("cannot open {}: {e}", csv_path.display()),
        })?;
    let mut raw: HashMap<String, Vec<f64>> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let id = record.get(0).unwrap_or("").trim().trim_matches('"').to_string();
        if id.is_empty() || record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        if i == 0 && record.get(1).map(|f| f.trim().parse::<f64>().is_err()).unwrap_or(false) {
            continue; // header row
        }
        let mut values = Vec::new();
        for field in record.iter().skip(1) {
            if field.trim().is_empty() {
                break;
            }
            values.push(field.trim().parse::<f64>().map_err(|_| Error::Load {
                learner: learner_id.to_string(),
                reason: format!("row '{id}': cannot parse value '{field}'"),
            })?);
        }
        raw.insert(id, values);
    }
    let mut out = HashMap::with_capacity(dataset.len());
    for series in dataset {
        let horizon = series.frequency.horizon();
        let forecast = raw.get(&series.id).ok_or_else(|| Error::Load {
            learner: learner_id.to_string(),
            reason: format!("missing forecasts for series '{}'", series.id),
        })?;
        if forecast.len() != horizon {
            return Err(Error::Load {
                learner: learner_id.to_string(),
                reason: format!(
                    "series '{}': forecast length {} != horizon {horizon}",
                    series.id,
                    forecast.len()
                ),
            });
        }
        out.insert(series.id.clone(), forecast.clone());
    }
    let extra = raw.len() - out.len();
    if extra > 0 {
        log::info!("{learner_id}: ignored {extra} forecasts for series outside the dataset");
    }
    Ok(out)
}

/// Writes forecasts in the precomputed CSV layout so internal and
/// external learners are interchangeable on disk.
pub fn write_forecasts(
    forecasts: &HashMap<String, Vec<f64>>,
    order: &[String],
    path: &Path,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for id in order {
        let row = &forecasts[id];
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(|v| crate::data::format_value(*v)));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Runs the configured learner pool over a dataset. Learner order is
/// the config order and is used everywhere downstream.
pub fn pool_forecasts(
    dataset: &[TimeSeries],
    config: &[(String, LearnerSource)],
) -> Result<ForecastMatrix> {
    if config.len() < 2 {
        return Err(Error::Config("learner pool needs at least 2 learners".to_string()));
    }
    for (i, (id, _)) in config.iter().enumerate() {
        if config[..i].iter().any(|(other, _)| other == id) {
            return Err(Error::Config(format!("duplicate learner id '{id}'")));
        }
    }
    let mut per_learner: Vec<HashMap<String, Vec<f64>>> = Vec::with_capacity(config.len());
    for (learner_id, source) in config {
        match source {
            LearnerSource::Precomputed(path) => {
                per_learner.push(load_precomputed(learner_id, path, dataset)?);
            }
            internal => {
                let results: Vec<Result<(String, Vec<f64>)>> = dataset
                    .par_iter()
                    .map(|series| {
                        let f = internal_forecast(
                            internal,
                            &series.train,
                            series.frequency.horizon(),
                            series.frequency.seasonal_period(),
                        )?;
                        Ok((series.id.clone(), f))
                    })
                    .collect();
                let mut map = HashMap::with_capacity(dataset.len());
                for r in results {
                    let (id, f) = r?;
                    map.insert(id, f);
                }
                per_learner.push(map);
            }
        }
    }
    let learner_ids: Vec<String> = config.iter().map(|(id, _)| id.clone()).collect();
    let mut rows = HashMap::with_capacity(dataset.len());
    let mut series_order = Vec::with_capacity(dataset.len());
    for series in dataset {
        let mut matrix = Vec::with_capacity(config.len());
        for map in &per_learner {
            matrix.push(map[&series.id].clone());
        }
        rows.insert(series.id.clone(), matrix);
        series_order.push(series.id.clone());
    }
    Ok(ForecastMatrix {
        learner_ids,
        rows,
        series_order,
    })
}
