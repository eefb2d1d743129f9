//! Flat key=value experiment configuration.
//!
//! Schema (defaults in parentheses; every effective value, default or
//! not, is echoed into the run manifest):
//!
//! ```text
//! # data
//! data.train_csv = <path>            required for experiment runs
//! data.test_csv  = <path>            required for experiment runs
//! data.info_csv  = <path>            optional domain-tag file
//! data.subset    = W                 one of H D W M Q Y
//!
//! # learner pool, evaluated in listed order
//! pool.learners  = SES=ses,Holt=holt,Damped=damped,Comb=comb,Theta=theta,Naive2=naive2
//! pool.holdout.<id> = <path>         holdout forecasts for a file: learner
//!
//! # cross-validation
//! cv.folds = 10
//! cv.repeats = 5
//! cv.seed = 42
//!
//! # fusion model architecture
//! arch.halvings = 5
//! arch.conv_filters = 64
//! arch.meta_features = 40
//! arch.max_length = 64
//! arch.dropout_rate = 0.1
//!
//! # optimization
//! train.learning_rate = 0.001
//! train.batch_size = 92
//! train.max_epochs = 150
//! train.patience = 20
//! train.validation_fraction = 0.1
//! train.seed = 42
//!
//! # experiment
//! methods = AVG,OracleBest,FFORMA-N,DeFORMA
//! external_scores = <path>           optional CSV of published scores
//! out_dir = out
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{format_value, FrequencyClass};
use crate::error::{Error, Result};
use crate::learners::LearnerSource;
use crate::model::TrainingConfig;

/// One pool entry: id, forecast source and (for precomputed sources)
/// optional holdout forecasts for meta-training.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    pub source: LearnerSource,
    pub holdout_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub info_csv: Option<PathBuf>,
    pub subset: FrequencyClass,
    pub pool: Vec<PoolEntry>,
    pub cv_folds: usize,
    pub cv_repeats: usize,
    pub cv_seed: u64,
    pub halvings: usize,
    pub conv_filters: usize,
    pub meta_features: usize,
    pub max_length: usize,
    pub dropout_rate: f64,
    pub training: TrainingConfig,
    pub methods: Vec<String>,
    pub external_scores: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train_csv: None,
            test_csv: None,
            info_csv: None,
            subset: FrequencyClass::Weekly,
            pool: vec![
                ("SES", LearnerSource::Ses),
                ("Holt", LearnerSource::Holt),
                ("Damped", LearnerSource::DampedHolt),
                ("Comb", LearnerSource::Comb),
                ("Theta", LearnerSource::Theta),
                ("Naive2", LearnerSource::Naive2),
            ]
            .into_iter()
            .map(|(id, source)| PoolEntry {
                id: id.to_string(),
                source,
                holdout_csv: None,
            })
            .collect(),
            cv_folds: 10,
            cv_repeats: 5,
            cv_seed: 42,
            halvings: 5,
            conv_filters: 64,
            meta_features: 40,
            max_length: 64,
            dropout_rate: 0.1,
            training: TrainingConfig::default(),
            methods: vec![
                "AVG".to_string(),
                "OracleBest".to_string(),
                "FFORMA-N".to_string(),
                "DeFORMA".to_string(),
            ],
            external_scores: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_pool(value: &str) -> Result<Vec<PoolEntry>> {
    let mut pool = Vec::new();
    for item in value.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let (id, source) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("pool entry '{item}' is not <id>=<source>"))
        })?;
        pool.push(PoolEntry {
            id: id.trim().to_string(),
            source: LearnerSource::parse(source.trim())?,
            holdout_csv: None,
        });
    }
    if pool.len() < 2 {
        return Err(Error::Config("pool.learners needs at least 2 entries".to_string()));
    }
    Ok(pool)
}

fn pool_to_string(pool: &[PoolEntry]) -> String {
    pool.iter()
        .map(|e| {
            let source = match &e.source {
                LearnerSource::Ses => "ses".to_string(),
                LearnerSource::Holt => "holt".to_string(),
                LearnerSource::DampedHolt => "damped".to_string(),
                LearnerSource::Comb => "comb".to_string(),
                LearnerSource::Theta => "theta".to_string(),
                LearnerSource::Naive2 => "naive2".to_string(),
                LearnerSource::Precomputed(path) => format!("file:{}", path.display()),
            };
            format!("{}={}", e.id, source)
        })
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Parses a key=value config file. Unknown keys are errors; `#`
    /// starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut holdouts: Vec<(String, PathBuf)> = Vec::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!(
                "line {}: expected key = value, got '{line}'",
                line_no + 1
            )))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", line_no + 1));
            match key {
                "data.train_csv" => cfg.train_csv = Some(PathBuf::from(value)),
                "data.test_csv" => cfg.test_csv = Some(PathBuf::from(value)),
                "data.info_csv" => cfg.info_csv = Some(PathBuf::from(value)),
                "data.subset" => {
                    let c = value.chars().next().ok_or_else(|| bad("subset"))?;
                    cfg.subset = FrequencyClass::from_letter(c)?;
                }
                "pool.learners" => cfg.pool = parse_pool(value)?,
                "cv.folds" => cfg.cv_folds = value.parse().map_err(|_| bad("cv.folds"))?,
                "cv.repeats" => cfg.cv_repeats = value.parse().map_err(|_| bad("cv.repeats"))?,
                "cv.seed" => cfg.cv_seed = value.parse().map_err(|_| bad("cv.seed"))?,
                "arch.halvings" => cfg.halvings = value.parse().map_err(|_| bad("arch.halvings"))?,
                "arch.conv_filters" => {
                    cfg.conv_filters = value.parse().map_err(|_| bad("arch.conv_filters"))?
                }
                "arch.meta_features" => {
                    cfg.meta_features = value.parse().map_err(|_| bad("arch.meta_features"))?
                }
                "arch.max_length" => {
                    cfg.max_length = value.parse().map_err(|_| bad("arch.max_length"))?
                }
                "arch.dropout_rate" => {
                    cfg.dropout_rate = value.parse().map_err(|_| bad("arch.dropout_rate"))?
                }
                "train.learning_rate" => {
                    cfg.training.learning_rate =
                        value.parse().map_err(|_| bad("train.learning_rate"))?
                }
                "train.batch_size" => {
                    cfg.training.batch_size = value.parse().map_err(|_| bad("train.batch_size"))?
                }
                "train.max_epochs" => {
                    cfg.training.max_epochs = value.parse().map_err(|_| bad("train.max_epochs"))?
                }
                "train.patience" => {
                    cfg.training.patience = value.parse().map_err(|_| bad("train.patience"))?
                }
                "train.validation_fraction" => {
                    cfg.training.validation_fraction =
                        value.parse().map_err(|_| bad("train.validation_fraction"))?
                }
                "train.seed" => cfg.training.seed = value.parse().map_err(|_| bad("train.seed"))?,
                "methods" => {
                    cfg.methods = value
                        .split(',')
                        .map(|m| m.trim().to_string())
                        .filter(|m| !m.is_empty())
                        .collect();
                    if cfg.methods.is_empty() {
                        return Err(bad("methods"));
                    }
                }
                "external_scores" => cfg.external_scores = Some(PathBuf::from(value)),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                other if other.starts_with("pool.holdout.") => {
                    let id = other.trim_start_matches("pool.holdout.").to_string();
                    holdouts.push((id, PathBuf::from(value)));
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown config key '{other}'",
                        line_no + 1
                    )))
                }
            }
        }
        for (id, path) in holdouts {
            let entry = cfg
                .pool
                .iter_mut()
                .find(|e| e.id == id)
                .ok_or_else(|| Error::Config(format!("pool.holdout.{id}: no such learner")))?;
            entry.holdout_csv = Some(path);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cv_folds < 2 {
            return Err(Error::Config("cv.folds must be >= 2".to_string()));
        }
        if self.cv_repeats == 0 {
            return Err(Error::Config("cv.repeats must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.training.validation_fraction) {
            return Err(Error::Config("train.validation_fraction outside [0,1)".to_string()));
        }
        if !(self.training.learning_rate.is_finite() && self.training.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".to_string()));
        }
        if self.training.batch_size == 0 || self.training.max_epochs == 0 {
            return Err(Error::Config("train.batch_size/max_epochs must be >= 1".to_string()));
        }
        let mut seen = std::collections::HashSet::new();
        for entry in &self.pool {
            if !seen.insert(&entry.id) {
                return Err(Error::Config(format!("duplicate learner id '{}'", entry.id)));
            }
        }
        for m in &self.methods {
            if !matches!(m.as_str(), "AVG" | "OracleBest" | "FFORMA-N" | "DeFORMA") {
                return Err(Error::Config(format!("unknown fusion method '{m}'")));
            }
        }
        Ok(())
    }

    /// Every effective key=value pair, defaults included, for the run
    /// manifest. Deterministically ordered.
    pub fn manifest_entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let path_or_dash =
            |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".to_string());
        m.insert("data.train_csv".to_string(), path_or_dash(&self.train_csv));
        m.insert("data.test_csv".to_string(), path_or_dash(&self.test_csv));
        m.insert("data.info_csv".to_string(), path_or_dash(&self.info_csv));
        m.insert("data.subset".to_string(), self.subset.letter().to_string());
        m.insert("pool.learners".to_string(), pool_to_string(&self.pool));
        for entry in &self.pool {
            if let Some(path) = &entry.holdout_csv {
                m.insert(
                    format!("pool.holdout.{}", entry.id),
                    path.display().to_string(),
                );
            }
        }
        m.insert("cv.folds".to_string(), self.cv_folds.to_string());
        m.insert("cv.repeats".to_string(), self.cv_repeats.to_string());
        m.insert("cv.seed".to_string(), self.cv_seed.to_string());
        m.insert("arch.halvings".to_string(), self.halvings.to_string());
        m.insert("arch.conv_filters".to_string(), self.conv_filters.to_string());
        m.insert("arch.meta_features".to_string(), self.meta_features.to_string());
        m.insert("arch.max_length".to_string(), self.max_length.to_string());
        m.insert("arch.dropout_rate".to_string(), format_value(self.dropout_rate));
        m.insert(
            "train.learning_rate".to_string(),
            format_value(self.training.learning_rate),
        );
        m.insert("train.batch_size".to_string(), self.training.batch_size.to_string());
        m.insert("train.max_epochs".to_string(), self.training.max_epochs.to_string());
        m.insert("train.patience".to_string(), self.training.patience.to_string());
        m.insert(
            "train.validation_fraction".to_string(),
            format_value(self.training.validation_fraction),
        );
        m.insert("train.seed".to_string(), self.training.seed.to_string());
        m.insert("methods".to_string(), self.methods.join(","));
        m.insert(
            "external_scores".to_string(),
            path_or_dash(&self.external_scores),
        );
        m.insert("out_dir".to_string(), self.out_dir.display().to_string());
        m
    }

    /// Renders the manifest block (sorted `key = value` lines).
    pub fn render_manifest(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.manifest_entries() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}
