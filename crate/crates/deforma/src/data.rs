//! M4-format dataset loading, validation, padding and seeded CV splits.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// M4 frequency subset. Carries the seasonal period used by Naive2 and
/// the temporal heads, and the official forecast horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrequencyClass {
    Hourly,
    Daily,
    Weekly,
    Monthly,
    Quarterly,
    Yearly,
}

impl FrequencyClass {
    pub const ALL: [FrequencyClass; 6] = [
        FrequencyClass::Hourly,
        FrequencyClass::Daily,
        FrequencyClass::Weekly,
        FrequencyClass::Monthly,
        FrequencyClass::Quarterly,
        FrequencyClass::Yearly,
    ];

    /// Seasonal period (M4 convention: H=24, M=12, Q=4, others 1).
    pub fn seasonal_period(self) -> usize {
        match self {
            FrequencyClass::Hourly => 24,
            FrequencyClass::Monthly => 12,
            FrequencyClass::Quarterly => 4,
            FrequencyClass::Daily | FrequencyClass::Weekly | FrequencyClass::Yearly => 1,
        }
    }

    /// Official M4 forecast horizon.
    pub fn horizon(self) -> usize {
        match self {
            FrequencyClass::Hourly => 48,
            FrequencyClass::Daily => 14,
            FrequencyClass::Weekly => 13,
            FrequencyClass::Monthly => 18,
            FrequencyClass::Quarterly => 8,
            FrequencyClass::Yearly => 6,
        }
    }

    /// One-letter subset label (H, D, W, M, Q, Y).
    pub fn letter(self) -> char {
        match self {
            FrequencyClass::Hourly => 'H',
            FrequencyClass::Daily => 'D',
            FrequencyClass::Weekly => 'W',
            FrequencyClass::Monthly => 'M',
            FrequencyClass::Quarterly => 'Q',
            FrequencyClass::Yearly => 'Y',
        }
    }

    pub fn from_letter(c: char) -> Result<Self> {
        match c.to_ascii_uppercase() {
            'H' => Ok(FrequencyClass::Hourly),
            'D' => Ok(FrequencyClass::Daily),
            'W' => Ok(FrequencyClass::Weekly),
            'M' => Ok(FrequencyClass::Monthly),
            'Q' => Ok(FrequencyClass::Quarterly),
            'Y' => Ok(FrequencyClass::Yearly),
            other => Err(Error::argument(format!("unknown frequency label '{other}'"))),
        }
    }
}

impl fmt::Display for FrequencyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FrequencyClass::Hourly => "Hourly",
            FrequencyClass::Daily => "Daily",
            FrequencyClass::Weekly => "Weekly",
            FrequencyClass::Monthly => "Monthly",
            FrequencyClass::Quarterly => "Quarterly",
            FrequencyClass::Yearly => "Yearly",
        };
        write!(f, "{name}")
    }
}

/// One M4-style series: training history plus an optional test holdout
/// of exactly the official horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub id: String,
    pub frequency: FrequencyClass,
    pub domain_tag: String,
    pub train: Vec<f64>,
    pub test: Option<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(
        id: impl Into<String>,
        frequency: FrequencyClass,
        domain_tag: impl Into<String>,
        train: Vec<f64>,
        test: Option<Vec<f64>>,
    ) -> Result<Self> {
        let id = id.into();
        if train.is_empty() {
            return Err(Error::validation(&id, "train series is empty"));
        }
        if let Some(bad) = train.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(&id, format!("non-finite train value {bad}")));
        }
        if let Some(t) = &test {
            if t.len() != frequency.horizon() {
                return Err(Error::validation(
                    &id,
                    format!(
                        "test length {} does not match horizon {}",
                        t.len(),
                        frequency.horizon()
                    ),
                ));
            }
            if let Some(bad) = t.iter().find(|v| !v.is_finite()) {
                return Err(Error::validation(&id, format!("non-finite test value {bad}")));
            }
        }
        Ok(TimeSeries {
            id,
            frequency,
            domain_tag: domain_tag.into(),
            train,
            test,
        })
    }
}

/// Fixed-length model input: the most recent observations of a series,
/// left-padded with zeros up to `values.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedInput {
    pub values: Vec<f64>,
    pub original_length: usize,
}

/// Seeded repeated k-fold assignment over series indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    pub repeats: usize,
    /// `assignments[repeat][fold]` lists the series indices of that fold.
    pub assignments: Vec<Vec<Vec<usize>>>,
}

impl FoldPlan {
    /// Training indices for one (repeat, fold): all indices outside the fold.
    pub fn train_indices(&self, repeat: usize, fold: usize) -> Vec<usize> {
        self.assignments[repeat]
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect()
    }

    pub fn validation_indices(&self, repeat: usize, fold: usize) -> &[usize] {
        &self.assignments[repeat][fold]
    }
}

fn parse_value(field: &str, id: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        row: id.to_string(),
        reason: format!("cannot parse value '{field}'"),
    })?;
    if !v.is_finite() {
        return Err(Error::validation(id, format!("non-finite value {v}")));
    }
    Ok(v)
}

/// Parses one M4 CSV row: id followed by values, trailing blank cells
/// treated as end-of-series.
fn parse_row(record: &csv::StringRecord) -> Result<(String, Vec<f64>)> {
    let id = record
        .get(0)
        .ok_or_else(|| Error::Parse {
            row: "<empty>".to_string(),
            reason: "missing id column".to_string(),
        })?
        .trim()
        .trim_matches('"')
        .to_string();
    let mut values = Vec::with_capacity(record.len().saturating_sub(1));
    let mut ended = false;
    for field in record.iter().skip(1) {
        if field.trim().is_empty() {
            ended = true;
            continue;
        }
        if ended {
            return Err(Error::Parse {
                row: id,
                reason: "value after blank cell".to_string(),
            });
        }
        values.push(parse_value(field, &id)?);
    }
    Ok((id, values))
}

fn looks_like_header(record: &csv::StringRecord) -> bool {
    record
        .get(1)
        .map(|f| !f.trim().is_empty() && f.trim().trim_matches('"').parse::<f64>().is_err())
        .unwrap_or(false)
}

fn read_value_rows(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if i == 0 && looks_like_header(&record) {
            continue;
        }
        if record.iter().all(|f| f.trim().is_empty()) {
            continue;
        }
        rows.push(parse_row(&record)?);
    }
    Ok(rows)
}

/// Reads the M4 info CSV, returning id -> (category, frequency letter).
fn read_info(path: &Path) -> Result<HashMap<String, String>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut map = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let id = record.get(0).unwrap_or("").trim().trim_matches('"').to_string();
        // Info rows are all-text, so header detection keys on the id
        // column name rather than numeric parsing.
        if i == 0 && matches!(id.to_ascii_lowercase().as_str(), "m4id" | "id" | "series_id") {
            continue;
        }
        if id.is_empty() {
            continue;
        }
        let category = record.get(1).unwrap_or("").trim().trim_matches('"').to_string();
        map.insert(id, category);
    }
    Ok(map)
}

/// Loads one M4 frequency subset from the official train/test/info CSV
/// triple. Test rows must have exactly the subset horizon; train rows
/// may carry trailing blanks.
pub fn load_m4_dataset(
    train_csv_path: &Path,
    test_csv_path: &Path,
    info_csv_path: &Path,
    frequency: FrequencyClass,
) -> Result<Vec<TimeSeries>> {
    let train_rows = read_value_rows(train_csv_path)?;
    let test_rows = read_value_rows(test_csv_path)?;
    let info = read_info(info_csv_path)?;

    let mut tests: HashMap<String, Vec<f64>> = HashMap::new();
    for (id, values) in test_rows {
        tests.insert(id, values);
    }

    let mut out = Vec::with_capacity(train_rows.len());
    for (id, train) in train_rows {
        let test = tests.remove(&id);
        let domain = info.get(&id).cloned().unwrap_or_default();
        out.push(TimeSeries::new(id, frequency, domain, train, test)?);
    }
    Ok(out)
}

/// Writes a dataset back to train/test CSVs in the M4 layout.
pub fn write_m4_dataset(
    dataset: &[TimeSeries],
    train_csv_path: &Path,
    test_csv_path: &Path,
) -> Result<()> {
    // Rows are ragged (one cell per observation), so disable the
    // equal-length check.
    let mut train_writer = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(train_csv_path)?;
    let mut test_writer = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(test_csv_path)?;
    for series in dataset {
        let mut row = vec![series.id.clone()];
        row.extend(series.train.iter().map(|v| format_value(*v)));
        train_writer.write_record(&row)?;
        if let Some(test) = &series.test {
            let mut row = vec![series.id.clone()];
            row.extend(test.iter().map(|v| format_value(*v)));
            test_writer.write_record(&row)?;
        }
    }
    train_writer.flush()?;
    test_writer.flush()?;
    Ok(())
}

/// Round-trip-exact decimal rendering of an f64.
pub fn format_value(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}

/// Left-pads (or truncates to the most recent values) a train series to
/// a fixed model input length.
pub fn pad_series(series: &TimeSeries, max_length: usize) -> Result<PaddedInput> {
    if max_length == 0 {
        return Err(Error::argument("max_length must be >= 1"));
    }
    Ok(pad_values(&series.train, max_length))
}

/// Padding on a raw value vector; used for truncated prefixes too.
pub fn pad_values(values: &[f64], max_length: usize) -> PaddedInput {
    let n = values.len();
    if n >= max_length {
        PaddedInput {
            values: values[n - max_length..].to_vec(),
            original_length: max_length,
        }
    } else {
        let mut padded = vec![0.0; max_length - n];
        padded.extend_from_slice(values);
        PaddedInput {
            values: padded,
            original_length: n,
        }
    }
}

/// Builds a seeded repeated k-fold partition. Fold sizes differ by at
/// most one; the same seed always reproduces the same plan.
pub fn make_fold_plan(n_series: usize, k: usize, repeats: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::argument(format!("k must be >= 2, got {k}")));
    }
    if k > n_series {
        return Err(Error::argument(format!(
            "k ({k}) exceeds number of series ({n_series})"
        )));
    }
    if repeats == 0 {
        return Err(Error::argument("repeats must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut indices: Vec<usize> = (0..n_series).collect();
        indices.shuffle(&mut rng);
        let base = n_series / k;
        let extra = n_series % k;
        let mut folds = Vec::with_capacity(k);
        let mut cursor = 0;
        for fold in 0..k {
            let size = base + usize::from(fold < extra);
            folds.push(indices[cursor..cursor + size].to_vec());
            cursor += size;
        }
        assignments.push(folds);
    }
    Ok(FoldPlan {
        seed,
        k,
        repeats,
        assignments,
    })
}
