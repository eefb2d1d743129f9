//! Hand-engineered per-series feature vector driving the feature-based
//! neural baseline.

use std::f64::consts::PI;
use std::path::Path;

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::metrics::autocorrelations;

pub const FEATURE_NAMES: [&str; 16] = [
    "length",
    "log-length",
    "trend-strength",
    "seasonal-strength",
    "acf1",
    "acf1-of-diff",
    "acf1-of-diff2",
    "seasonal-acf",
    "spectral-entropy-proxy",
    "coefficient-of-variation",
    "linearity",
    "curvature",
    "stability",
    "lumpiness",
    "crossing-rate",
    "flat-spot-fraction",
];

/// Fixed-order 16-element feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

/// Per-feature z-score scaler fit on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl FeatureScaler {
    pub fn apply(&self, features: &FeatureVector) -> FeatureVector {
        let values = features
            .values
            .iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        FeatureVector { values }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64
}

fn acf1(values: &[f64]) -> f64 {
    if values.len() < 3 {
        return 0.0;
    }
    autocorrelations(values, 1)[0]
}

fn diff(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Centered moving-average trend estimate with the given window.
fn moving_average_trend(values: &[f64], window: usize) -> Vec<Option<f64>> {
    let n = values.len();
    let mut trend = vec![None; n];
    if window < 2 || window > n {
        return trend;
    }
    if window % 2 == 1 {
        let half = window / 2;
        for t in half..n - half {
            trend[t] = Some(values[t - half..=t + half].iter().sum::<f64>() / window as f64);
        }
    } else {
        let half = window / 2;
        for t in half..n - half {
            let mut s = 0.5 * values[t - half] + 0.5 * values[t + half];
            s += values[t - half + 1..t + half].iter().sum::<f64>();
            trend[t] = Some(s / window as f64);
        }
    }
    trend
}

/// Additive classical decomposition strengths:
/// 1 - Var(remainder) / Var(component-adjusted series), clipped to [0,1].
fn decomposition_strengths(values: &[f64], period: usize) -> (f64, f64) {
    let n = values.len();
    let trend_window = if period > 1 { period } else { 5.min(n) };
    let trend = moving_average_trend(values, trend_window);
    let detrended: Vec<(usize, f64)> = values
        .iter()
        .enumerate()
        .filter_map(|(t, &y)| trend[t].map(|tr| (t, y - tr)))
        .collect();
    if detrended.len() < 3 {
        return (0.0, 0.0);
    }
    // Seasonal component: per-position means of the detrended series.
    let seasonal: Vec<f64> = if period > 1 && n >= 2 * period {
        let mut sums = vec![0.0; period];
        let mut counts = vec![0usize; period];
        for &(t, d) in &detrended {
            sums[t % period] += d;
            counts[t % period] += 1;
        }
        let means: Vec<f64> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        (0..n).map(|t| means[t % period]).collect()
    } else {
        vec![0.0; n]
    };

    let remainder: Vec<f64> = detrended.iter().map(|&(t, d)| d - seasonal[t]).collect();
    let deseasonalized: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(t, &y)| y - seasonal[t])
        .collect();
    let detrended_only: Vec<f64> = detrended.iter().map(|&(_, d)| d).collect();

    let var_rem = variance(&remainder);
    let var_deseason = variance(&deseasonalized);
    let var_detrend = variance(&detrended_only);
    let trend_strength = if var_deseason > 0.0 {
        (1.0 - var_rem / var_deseason).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let seasonal_strength = if period > 1 && var_detrend > 0.0 {
        (1.0 - var_rem / var_detrend).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (trend_strength, seasonal_strength)
}

/// Shannon entropy of the normalized periodogram, scaled to [0,1].
fn spectral_entropy(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 4 {
        return 0.0;
    }
    let m = mean(values);
    let centered: Vec<f64> = values.iter().map(|v| v - m).collect();
    let bins = n / 2;
    let mut power = Vec::with_capacity(bins);
    for k in 1..=bins {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &v) in centered.iter().enumerate() {
            let angle = -2.0 * PI * k as f64 * t as f64 / n as f64;
            re += v * angle.cos();
            im += v * angle.sin();
        }
        power.push(re * re + im * im);
    }
    let total: f64 = power.iter().sum();
    if total <= 0.0 || bins < 2 {
        return 0.0;
    }
    let mut entropy = 0.0;
    for p in &power {
        let q = p / total;
        if q > 0.0 {
            entropy -= q * q.ln();
        }
    }
    (entropy / (bins as f64).ln()).clamp(0.0, 1.0)
}

/// Quadratic-trend coefficients on standardized inputs: fits
/// y ~ b0 + b1*t + b2*t^2 with t scaled to [-1,1], returns (b1, b2)
/// divided by the series scale.
fn linearity_curvature(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let sd = variance(values).sqrt();
    if n < 3 || sd <= 0.0 {
        return (0.0, 0.0);
    }
    let ts: Vec<f64> = (0..n).map(|t| 2.0 * t as f64 / (n - 1) as f64 - 1.0).collect();
    // Normal equations for [1, t, t^2].
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for (t, &y) in ts.iter().zip(values) {
        let basis = [1.0, *t, t * t];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += basis[i] * basis[j];
            }
            b[i] += basis[i] * y;
        }
    }
    // Gaussian elimination, 3x3.
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        if a[col][col].abs() < 1e-12 {
            return (0.0, 0.0);
        }
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for j in col..3 {
                a[row][j] -= f * a[col][j];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut s = b[row];
        for j in row + 1..3 {
            s -= a[row][j] * x[j];
        }
        x[row] = s / a[row][row];
    }
    (x[1] / sd, x[2] / sd)
}

/// Variance of tiled means / tiled variances of the standardized series.
fn stability_lumpiness(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let sd = variance(values).sqrt();
    if n < 4 || sd <= 0.0 {
        return (0.0, 0.0);
    }
    let m = mean(values);
    let standardized: Vec<f64> = values.iter().map(|v| (v - m) / sd).collect();
    let width = 10.min(n / 2).max(2);
    let means: Vec<f64> = standardized.chunks(width).map(mean).collect();
    let vars: Vec<f64> = standardized.chunks(width).map(variance).collect();
    (variance(&means), variance(&vars))
}

fn crossing_rate(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let above: Vec<bool> = values.iter().map(|&v| v > median).collect();
    let crossings = above.windows(2).filter(|w| w[0] != w[1]).count();
    crossings as f64 / (n - 1) as f64
}

/// Longest run of observations falling in the same decile of the range,
/// as a fraction of series length.
fn flat_spot_fraction(values: &[f64]) -> f64 {
    let n = values.len();
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return 1.0; // constant series
    }
    let bin = |v: f64| (((v - lo) / (hi - lo) * 10.0).floor() as usize).min(9);
    let mut best = 1usize;
    let mut run = 1usize;
    for w in values.windows(2) {
        if bin(w[0]) == bin(w[1]) {
            run += 1;
            best = best.max(run);
        } else {
            run = 1;
        }
    }
    best as f64 / n as f64
}

/// Extracts the fixed 16-feature vector from a series' training values.
pub fn extract_features(series: &TimeSeries) -> Result<FeatureVector> {
    let values = &series.train;
    if values.len() < 3 {
        return Err(Error::argument(format!(
            "feature extraction needs >= 3 observations, series '{}' has {}",
            series.id,
            values.len()
        )));
    }
    let period = series.frequency.seasonal_period();
    let n = values.len();
    let (trend_strength, seasonal_strength) = decomposition_strengths(values, period);
    let d1 = diff(values);
    let d2 = diff(&d1);
    let seasonal_acf = if period > 1 && n > period + 2 {
        autocorrelations(values, period)[period - 1]
    } else {
        0.0
    };
    let m = mean(values);
    let cv = if m.abs() > 0.0 {
        variance(values).sqrt() / m.abs()
    } else {
        0.0
    };
    let (linearity, curvature) = linearity_curvature(values);
    let (stability, lumpiness) = stability_lumpiness(values);
    let features = vec![
        n as f64,
        (n as f64).ln(),
        trend_strength,
        seasonal_strength,
        acf1(values),
        acf1(&d1),
        acf1(&d2),
        seasonal_acf,
        spectral_entropy(values),
        cv,
        linearity,
        curvature,
        stability,
        lumpiness,
        crossing_rate(values),
        flat_spot_fraction(values),
    ];
    debug_assert_eq!(features.len(), FEATURE_NAMES.len());
    if let Some(bad) = features.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(
            &series.id,
            format!("non-finite feature '{}'", FEATURE_NAMES[bad]),
        ));
    }
    Ok(FeatureVector { values: features })
}

/// Fits a per-feature z-score scaler; zero-variance features pass
/// through with scale 1.
pub fn fit_scaler(matrix: &[FeatureVector]) -> Result<FeatureScaler> {
    if matrix.len() < 2 {
        return Err(Error::argument("scaler needs at least 2 series"));
    }
    let dim = matrix[0].values.len();
    let mut means = vec![0.0; dim];
    let mut scales = vec![0.0; dim];
    for j in 0..dim {
        let column: Vec<f64> = matrix.iter().map(|f| f.values[j]).collect();
        means[j] = mean(&column);
        let sd = variance(&column).sqrt();
        if sd > 0.0 {
            scales[j] = sd;
        } else {
            log::debug!("feature '{}' has zero variance; passthrough scale", FEATURE_NAMES[j]);
            scales[j] = 1.0;
        }
    }
    Ok(FeatureScaler { means, scales })
}

pub fn normalize_features(matrix: &[FeatureVector]) -> Result<(Vec<FeatureVector>, FeatureScaler)> {
    let scaler = fit_scaler(matrix)?;
    let normalized = matrix.iter().map(|f| scaler.apply(f)).collect();
    Ok((normalized, scaler))
}

/// Writes a feature matrix as CSV with the fixed header order.
pub fn write_features_csv(ids: &[String], matrix: &[FeatureVector], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["series_id".to_string()];
    header.extend(FEATURE_NAMES.iter().map(|s| s.to_string()));
    writer.write_record(&header)?;
    for (id, features) in ids.iter().zip(matrix) {
        let mut record = vec![id.clone()];
        record.extend(features.values.iter().map(|v| crate::data::format_value(*v)));
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
