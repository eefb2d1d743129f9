//! Experiment orchestration: dataset ingestion, cross-validated
//! meta-training, official-test evaluation, score tables and reports.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, PoolEntry};
use crate::data::{load_m4_dataset, pad_values, TimeSeries};
use crate::error::{Error, Result};
use crate::features::extract_features;
use crate::fusion::{avg_fuse, oracle_best, train_fforma_n, FformaN, FusionMethodId};
use crate::learners::{load_precomputed, pool_forecasts, write_forecasts, ForecastMatrix, LearnerSource};
use crate::metrics::{aggregate_owa, evaluate_forecast};
use crate::model::{
    fuse_forecast, make_training_table, ArchitectureConfig, DeformaModel, TableLearner,
    TrainingTable,
};
use crate::rank::{schulze_rank, ScoreTable, SchulzeResult};

pub const STAGES: [&str; 6] = [
    "ingest",
    "training-table",
    "cross-validation",
    "final-training",
    "test-evaluation",
    "score-tables",
];

const PARTIAL_MARKER: &str = "PARTIAL";
const STAGE_LOG: &str = "stages.txt";

/// Well-known files inside a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    pub fn mean_scores(&self) -> PathBuf {
        self.root.join("score_mean_owa.csv")
    }

    pub fn median_scores(&self) -> PathBuf {
        self.root.join("score_median_owa.csv")
    }

    pub fn per_series_errors(&self) -> PathBuf {
        self.root.join("per_series_owa.csv")
    }

    pub fn cv_scores(&self) -> PathBuf {
        self.root.join("cv_weighted_loss.csv")
    }

    pub fn deforma_checkpoint(&self) -> PathBuf {
        self.root.join("deforma.ckpt")
    }

    pub fn fforma_n_checkpoint(&self) -> PathBuf {
        self.root.join("fforma_n.ckpt")
    }

    pub fn base_forecast(&self, learner_id: &str) -> PathBuf {
        self.root.join(format!("forecast_{learner_id}.csv"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }

    fn partial_marker(&self) -> PathBuf {
        self.root.join(PARTIAL_MARKER)
    }

    fn stage_log(&self) -> PathBuf {
        self.root.join(STAGE_LOG)
    }

    pub fn completed_stages(&self) -> Vec<String> {
        fs::read_to_string(self.stage_log())
            .map(|s| s.lines().map(|l| l.to_string()).collect())
            .unwrap_or_default()
    }

    pub fn is_complete(&self) -> bool {
        !self.partial_marker().exists() && self.completed_stages().len() == STAGES.len()
    }

    fn begin(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        fs::write(self.partial_marker(), "run in progress\n")?;
        fs::write(self.stage_log(), "")?;
        Ok(())
    }

    fn finish_stage(&self, stage: &str) -> Result<()> {
        let mut log = fs::read_to_string(self.stage_log()).unwrap_or_default();
        log.push_str(stage);
        log.push('\n');
        fs::write(self.stage_log(), log)?;
        Ok(())
    }

    fn complete(&self) -> Result<()> {
        let _ = fs::remove_file(self.partial_marker());
        Ok(())
    }
}

/// Writes a methods x subsets score table; cells use round-trip-exact
/// decimals, missing medians become empty cells.
pub fn write_score_table(table: &ScoreTable, path: &Path, use_median: bool) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["method".to_string()];
    header.extend(table.subsets.iter().cloned());
    writer.write_record(&header)?;
    for (i, method) in table.methods.iter().enumerate() {
        let mut record = vec![method.clone()];
        for j in 0..table.subsets.len() {
            if use_median {
                record.push(
                    table.median_owa[i][j]
                        .map(crate::data::format_value)
                        .unwrap_or_default(),
                );
            } else {
                record.push(crate::data::format_value(table.mean_owa[i][j]));
            }
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a score table written by `write_score_table` (or hand-made in
/// the same layout). Empty cells are allowed only as medians.
pub fn read_score_table(path: &Path) -> Result<ScoreTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let mut methods = Vec::new();
    let mut subsets: Vec<String> = Vec::new();
    let mut mean = Vec::new();
    let mut median = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if i == 0 {
            subsets = record.iter().skip(1).map(|s| s.trim().to_string()).collect();
            continue;
        }
        let method = record.get(0).unwrap_or("").trim().to_string();
        if method.is_empty() {
            continue;
        }
        let mut mean_row = Vec::new();
        let mut median_row = Vec::new();
        for field in record.iter().skip(1) {
            let field = field.trim();
            if field.is_empty() {
                mean_row.push(f64::NAN);
                median_row.push(None);
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    row: method.clone(),
                    reason: format!("bad score cell '{field}'"),
                })?;
                mean_row.push(v);
                median_row.push(Some(v));
            }
        }
        mean_row.resize(subsets.len(), f64::NAN);
        median_row.resize(subsets.len(), None);
        methods.push(method);
        mean.push(mean_row);
        median.push(median_row);
    }
    let mut table = ScoreTable::new(methods, subsets, mean)?;
    table.median_owa = median;
    Ok(table)
}

/// Loads the configured dataset subset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<TimeSeries>> {
    let train = cfg
        .train_csv
        .as_ref()
        .ok_or_else(|| Error::Config("data.train_csv is required".to_string()))?;
    let test = cfg
        .test_csv
        .as_ref()
        .ok_or_else(|| Error::Config("data.test_csv is required".to_string()))?;
    let info = cfg.info_csv.clone().unwrap_or_else(|| PathBuf::from("/dev/null"));
    let dataset = load_m4_dataset(train, test, &info, cfg.subset)?;
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset has no series".to_string()));
    }
    Ok(dataset)
}

/// Resolves config pool entries into training-table learners, loading
/// holdout forecasts for precomputed sources.
pub fn build_table_learners(
    cfg: &ExperimentConfig,
    dataset: &[TimeSeries],
) -> Result<Vec<TableLearner>> {
    table_learners(&cfg.pool, dataset)
}

fn table_learners(pool: &[PoolEntry], dataset: &[TimeSeries]) -> Result<Vec<TableLearner>> {
    pool.iter()
        .map(|entry| {
            let holdout_forecasts = match (&entry.source, &entry.holdout_csv) {
                (LearnerSource::Precomputed(_), Some(path)) => {
                    Some(load_precomputed(&entry.id, path, dataset)?)
                }
                (LearnerSource::Precomputed(path), None) => {
                    return Err(Error::Config(format!(
                        "precomputed learner '{}' ({}) needs pool.holdout.{} for meta-training",
                        entry.id,
                        path.display(),
                        entry.id
                    )))
                }
                _ => None,
            };
            Ok(TableLearner {
                id: entry.id.clone(),
                source: entry.source.clone(),
                holdout_forecasts,
            })
        })
        .collect()
}

fn subset_table(table: &TrainingTable, indices: &[usize]) -> TrainingTable {
    let ids: Vec<String> = indices.iter().map(|&i| table.ids[i].clone()).collect();
    let inputs = indices.iter().map(|&i| table.inputs[i].clone()).collect();
    let targets = crate::metrics::ErrorMatrix {
        learner_ids: table.targets.learner_ids.clone(),
        per_series: ids
            .iter()
            .map(|id| (id.clone(), table.targets.per_series[id].clone()))
            .collect(),
        series_order: ids.clone(),
    };
    TrainingTable {
        ids,
        inputs,
        targets,
        skipped: 0,
    }
}

/// Architecture settings implied by the config plus the pool size.
pub fn arch_for(cfg: &ExperimentConfig) -> ArchitectureConfig {
    arch_from_config(cfg)
}

fn arch_from_config(cfg: &ExperimentConfig) -> ArchitectureConfig {
    ArchitectureConfig {
        halvings: cfg.halvings,
        conv_filters: cfg.conv_filters,
        meta_features: cfg.meta_features,
        max_length: cfg.max_length,
        dropout_rate: cfg.dropout_rate,
        n_learners: cfg.pool.len(),
    }
}

fn features_for_prefix(series: &TimeSeries) -> Result<crate::features::FeatureVector> {
    let horizon = series.frequency.horizon();
    let prefix = &series.train[..series.train.len() - horizon];
    let view = TimeSeries::new(
        series.id.clone(),
        series.frequency,
        series.domain_tag.clone(),
        prefix.to_vec(),
        None,
    )?;
    extract_features(&view)
}

/// Out-of-fold weighted loss Σ wᵢFᵢ of one method over validation rows.
fn fold_losses(
    method: FusionMethodId,
    table: &TrainingTable,
    val: &[usize],
    deforma: Option<&DeformaModel>,
    fforma_n: Option<&FformaN>,
    dataset: &[TimeSeries],
) -> Result<Vec<f64>> {
    let k = table.targets.learner_ids.len();
    val.iter()
        .map(|&i| {
            let row = table.targets.row(&table.ids[i]).unwrap();
            let loss = match method {
                FusionMethodId::Avg => row.iter().sum::<f64>() / k as f64,
                FusionMethodId::OracleBest => row[oracle_best(row)?],
                FusionMethodId::Deforma => {
                    let model = deforma.expect("deforma model trained for this fold");
                    let w = model.predict_weights(&table.inputs[i])?;
                    w.weights.iter().zip(row).map(|(a, b)| a * b).sum()
                }
                FusionMethodId::FformaN => {
                    let model = fforma_n.expect("fforma-n model trained for this fold");
                    let series = dataset
                        .iter()
                        .find(|s| s.id == table.ids[i])
                        .ok_or_else(|| Error::validation(&table.ids[i], "missing series"))?;
                    let w = model.predict_weights(&features_for_prefix(series)?)?;
                    w.weights.iter().zip(row).map(|(a, b)| a * b).sum()
                }
            };
            Ok(loss)
        })
        .collect()
}

/// Test-split forecasts of every configured method for one series.
fn method_forecast(
    method: FusionMethodId,
    series: &TimeSeries,
    learner_forecasts: &[Vec<f64>],
    cfg: &ExperimentConfig,
    deforma: Option<&DeformaModel>,
    fforma_n: Option<&FformaN>,
) -> Result<Vec<f64>> {
    match method {
        FusionMethodId::Avg => avg_fuse(learner_forecasts),
        FusionMethodId::OracleBest => {
            // The oracle inspects the test errors by definition.
            let test = series
                .test
                .as_ref()
                .ok_or_else(|| Error::validation(&series.id, "missing test holdout"))?;
            let period = series.frequency.seasonal_period();
            let mut errors = Vec::with_capacity(learner_forecasts.len());
            for forecast in learner_forecasts {
                errors.push(evaluate_forecast(&series.train, test, forecast, period)?.owa);
            }
            Ok(learner_forecasts[oracle_best(&errors)?].clone())
        }
        FusionMethodId::Deforma => {
            let model = deforma.ok_or_else(|| Error::State("deforma model not trained".to_string()))?;
            let input = pad_values(&series.train, cfg.max_length);
            let w = model.predict_weights(&input)?;
            fuse_forecast(&w, learner_forecasts)
        }
        FusionMethodId::FformaN => {
            let model =
                fforma_n.ok_or_else(|| Error::State("fforma-n model not trained".to_string()))?;
            let w = model.predict_weights(&extract_features(series)?)?;
            fuse_forecast(&w, learner_forecasts)
        }
    }
}

/// Runs the full experiment described by the config and returns the
/// run directory. Every stage is logged in `stages.txt`; failures
/// leave the `PARTIAL` marker in place for diagnosis and resume.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let paths = RunPaths::new(&cfg.out_dir);
    paths.begin()?;
    match run_experiment_inner(cfg, &paths) {
        Ok(()) => {
            paths.complete()?;
            Ok(paths.root.clone())
        }
        Err(e) => {
            let _ = fs::write(paths.partial_marker(), format!("failed: {e}\n"));
            Err(e)
        }
    }
}

fn run_experiment_inner(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<()> {
    fs::write(paths.manifest(), cfg.render_manifest())?;
    let methods: Vec<FusionMethodId> = cfg
        .methods
        .iter()
        .map(|m| FusionMethodId::parse(m))
        .collect::<Result<_>>()?;
    let needs_deforma = methods.contains(&FusionMethodId::Deforma);
    let needs_fforma_n = methods.contains(&FusionMethodId::FformaN);

    // ingest
    let dataset = load_dataset(cfg)?;
    paths.finish_stage("ingest")?;

    // training-table
    let learners = table_learners(&cfg.pool, &dataset)?;
    let table = make_training_table(&dataset, &learners, cfg.max_length)?;
    log::info!(
        "training table: {} series ({} skipped)",
        table.ids.len(),
        table.skipped
    );
    paths.finish_stage("training-table")?;

    // cross-validation
    let trains_models = needs_deforma || needs_fforma_n;
    let plan = crate::data::make_fold_plan(table.ids.len(), cfg.cv_folds, cfg.cv_repeats, cfg.cv_seed)?;
    let mut cv_losses: HashMap<FusionMethodId, Vec<f64>> =
        methods.iter().map(|&m| (m, Vec::new())).collect();
    for repeat in 0..cfg.cv_repeats {
        for fold in 0..cfg.cv_folds {
            let train_idx = plan.train_indices(repeat, fold);
            let val_idx = plan.validation_indices(repeat, fold).to_vec();
            if train_idx.is_empty() || val_idx.is_empty() {
                continue;
            }
            let fold_table = subset_table(&table, &train_idx);
            let fold_seed = cfg
                .training
                .seed
                .wrapping_add((repeat * cfg.cv_folds + fold) as u64);
            let mut fold_tcfg = cfg.training;
            fold_tcfg.seed = fold_seed;
            let deforma = if needs_deforma {
                let mut model = DeformaModel::build(
                    arch_from_config(cfg),
                    cfg.subset.seasonal_period(),
                    fold_seed,
                )?;
                crate::model::train(&mut model, &fold_table, &fold_tcfg)?;
                Some(model)
            } else {
                None
            };
            let fforma_n = if needs_fforma_n {
                let fold_dataset: Vec<TimeSeries> = dataset
                    .iter()
                    .filter(|s| fold_table.ids.contains(&s.id))
                    .cloned()
                    .collect();
                let (model, _) = train_fforma_n(&fold_dataset, &fold_table.targets, &fold_tcfg)?;
                Some(model)
            } else {
                None
            };
            for &method in &methods {
                let losses = fold_losses(
                    method,
                    &table,
                    &val_idx,
                    deforma.as_ref(),
                    fforma_n.as_ref(),
                    &dataset,
                )?;
                cv_losses.get_mut(&method).unwrap().extend(losses);
            }
        }
    }
    {
        let mut writer = csv::Writer::from_path(paths.cv_scores())?;
        writer.write_record(["method", "subset", "mean_weighted_loss"])?;
        for &method in &methods {
            let losses = &cv_losses[&method];
            let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            writer.write_record([
                method.name(),
                &cfg.subset.letter().to_string(),
                &crate::data::format_value(mean),
            ])?;
        }
        writer.flush()?;
    }
    let _ = trains_models;
    paths.finish_stage("cross-validation")?;

    // final-training on the full table
    let final_deforma = if needs_deforma {
        let mut model = DeformaModel::build(
            arch_from_config(cfg),
            cfg.subset.seasonal_period(),
            cfg.training.seed,
        )?;
        let history = crate::model::train(&mut model, &table, &cfg.training)?;
        let mut meta = BTreeMap::new();
        meta.insert("best_epoch".to_string(), history.best_epoch.to_string());
        model.save(&paths.deforma_checkpoint(), &meta)?;
        Some(model)
    } else {
        None
    };
    let final_fforma_n = if needs_fforma_n {
        let (model, history) = train_fforma_n(&dataset, &table.targets, &cfg.training)?;
        let mut meta = BTreeMap::new();
        meta.insert("best_epoch".to_string(), history.best_epoch.to_string());
        model.save(&paths.fforma_n_checkpoint(), &meta)?;
        Some(model)
    } else {
        None
    };
    paths.finish_stage("final-training")?;

    // test-evaluation
    let pool_config: Vec<(String, LearnerSource)> = cfg
        .pool
        .iter()
        .map(|e| (e.id.clone(), e.source.clone()))
        .collect();
    let forecasts = pool_forecasts(&dataset, &pool_config)?;
    write_forecasts_for_pool(cfg, &forecasts, paths)?;
    let (score_table, per_series) = evaluate_methods(
        cfg,
        &dataset,
        &forecasts,
        &methods,
        final_deforma.as_ref(),
        final_fforma_n.as_ref(),
    )?;
    {
        let mut writer = csv::Writer::from_path(paths.per_series_errors())?;
        let mut header = vec!["series_id".to_string()];
        header.extend(methods.iter().map(|m| m.name().to_string()));
        writer.write_record(&header)?;
        for (id, row) in &per_series {
            let mut record = vec![id.clone()];
            record.extend(row.iter().map(|v| crate::data::format_value(*v)));
            writer.write_record(&record)?;
        }
        writer.flush()?;
    }
    paths.finish_stage("test-evaluation")?;

    // score-tables
    write_score_table(&score_table, &paths.mean_scores(), false)?;
    write_score_table(&score_table, &paths.median_scores(), true)?;
    paths.finish_stage("score-tables")?;
    Ok(())
}

/// Writes one precomputed-layout forecast CSV per pool learner into
/// the run directory.
pub fn write_forecasts_for_pool(
    cfg: &ExperimentConfig,
    forecasts: &ForecastMatrix,
    paths: &RunPaths,
) -> Result<()> {
    for (i, entry) in cfg.pool.iter().enumerate() {
        let per_learner: HashMap<String, Vec<f64>> = forecasts
            .series_order
            .iter()
            .map(|id| (id.clone(), forecasts.rows[id][i].clone()))
            .collect();
        write_forecasts(
            &per_learner,
            &forecasts.series_order,
            &paths.base_forecast(&entry.id),
        )?;
    }
    Ok(())
}

/// Official-test evaluation of every configured method. Returns the
/// one-subset score table plus ordered per-series OWA rows.
pub fn evaluate_methods(
    cfg: &ExperimentConfig,
    dataset: &[TimeSeries],
    forecasts: &ForecastMatrix,
    methods: &[FusionMethodId],
    deforma: Option<&DeformaModel>,
    fforma_n: Option<&FformaN>,
) -> Result<(ScoreTable, Vec<(String, Vec<f64>)>)> {
    let period = cfg.subset.seasonal_period();
    let mut per_series: Vec<(String, Vec<f64>)> = Vec::new();
    let mut per_method_pairs: Vec<Vec<(f64, f64)>> = vec![Vec::new(); methods.len()];
    let mut reference_pairs: Vec<(f64, f64)> = Vec::new();
    for series in dataset {
        let Some(test) = &series.test else {
            log::info!("skipping '{}' in evaluation: no test holdout", series.id);
            continue;
        };
        let learner_forecasts = forecasts
            .forecasts(&series.id)
            .ok_or_else(|| Error::validation(&series.id, "missing pool forecasts"))?;
        let reference = crate::metrics::naive2_forecast(&series.train, period, test.len())?;
        let ref_smape = crate::metrics::smape(test, &reference)?;
        let ref_mase = crate::metrics::mase(&series.train, test, &reference, period)?;
        reference_pairs.push((ref_smape, ref_mase));
        let mut row = Vec::with_capacity(methods.len());
        for (m, &method) in methods.iter().enumerate() {
            let fused = method_forecast(method, series, learner_forecasts, cfg, deforma, fforma_n)?;
            let errors = evaluate_forecast(&series.train, test, &fused, period)?;
            per_method_pairs[m].push((errors.smape, errors.mase));
            row.push(errors.owa);
        }
        per_series.push((series.id.clone(), row));
    }
    if per_series.is_empty() {
        return Err(Error::Dataset("no series with test holdouts".to_string()));
    }
    let mut mean = Vec::with_capacity(methods.len());
    let mut median = Vec::with_capacity(methods.len());
    for pairs in &per_method_pairs {
        let (mean_owa, median_owa) = aggregate_owa(pairs, &reference_pairs)?;
        mean.push(vec![mean_owa]);
        median.push(vec![Some(median_owa)]);
    }
    let mut table = ScoreTable::new(
        methods.iter().map(|m| m.name().to_string()).collect(),
        vec![cfg.subset.letter().to_string()],
        mean,
    )?;
    table.median_owa = median;
    Ok((table, per_series))
}

/// Merges externally published mean-OWA rows (same CSV layout) into a
/// score table; external method names get an `*` suffix and only
/// matching subset columns are accepted.
pub fn merge_external_scores(table: &ScoreTable, external: &ScoreTable) -> Result<ScoreTable> {
    if external.subsets != table.subsets {
        return Err(Error::Config(format!(
            "external score subsets {:?} do not match run subsets {:?}",
            external.subsets, table.subsets
        )));
    }
    let mut merged = table.clone();
    for (i, method) in external.methods.iter().enumerate() {
        merged.methods.push(format!("{method}*"));
        merged.mean_owa.push(external.mean_owa[i].clone());
        merged.median_owa.push(external.median_owa[i].clone());
    }
    Ok(merged)
}

fn markers(column: &[f64]) -> Vec<&'static str> {
    let mut sorted: Vec<f64> = column.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let best = sorted[0];
    let second = sorted.iter().copied().find(|&v| v > best);
    column
        .iter()
        .map(|&v| {
            if v == best {
                "*"
            } else if Some(v) == second {
                "+"
            } else {
                ""
            }
        })
        .collect()
}

/// Renders an aligned-text table: method rows, subset columns with
/// best (`*`) / second-best (`+`) markers, plus the Schulze rank.
pub fn render_table(
    title: &str,
    table: &ScoreTable,
    ranks: Option<&SchulzeResult>,
    use_median: bool,
) -> String {
    let cell = |i: usize, j: usize| -> Option<f64> {
        if use_median {
            table.median_owa[i][j]
        } else {
            Some(table.mean_owa[i][j])
        }
    };
    let mut column_markers: Vec<Vec<&str>> = Vec::new();
    for j in 0..table.subsets.len() {
        let values: Vec<f64> = (0..table.methods.len())
            .filter_map(|i| cell(i, j))
            .collect();
        if values.len() == table.methods.len() {
            column_markers.push(markers(&values));
        } else {
            column_markers.push(vec![""; table.methods.len()]);
        }
    }
    let name_width = table
        .methods
        .iter()
        .map(|m| m.len())
        .max()
        .unwrap_or(6)
        .max("method".len());
    let mut out = format!("{title}\n");
    out.push_str(&format!("{:<name_width$}", "method"));
    for subset in &table.subsets {
        out.push_str(&format!(" {subset:>9}"));
    }
    if ranks.is_some() {
        out.push_str("  rank");
    }
    out.push('\n');
    for (i, method) in table.methods.iter().enumerate() {
        out.push_str(&format!("{method:<name_width$}"));
        for j in 0..table.subsets.len() {
            match cell(i, j) {
                Some(v) => out.push_str(&format!(" {:>8.3}{}", v, if column_markers[j][i].is_empty() { " " } else { column_markers[j][i] })),
                None => out.push_str(&format!(" {:>9}", "-")),
            }
        }
        if let Some(r) = ranks {
            out.push_str(&format!("  {:>4}", r.ranks[method]));
        }
        out.push('\n');
    }
    out
}

/// Builds the formatted report for a completed run directory and
/// writes `report.txt`. Errors on incomplete runs, listing missing
/// stages.
pub fn report(run_dir: &Path, external_scores: Option<&Path>) -> Result<String> {
    let paths = RunPaths::new(run_dir);
    let done = paths.completed_stages();
    if !paths.is_complete() {
        let missing: Vec<&str> = STAGES
            .iter()
            .filter(|s| !done.iter().any(|d| d == *s))
            .copied()
            .collect();
        return Err(Error::State(format!(
            "run is incomplete; missing stages: {}",
            missing.join(", ")
        )));
    }
    let mut table = read_score_table(&paths.mean_scores())?;
    let median_table = read_score_table(&paths.median_scores())?;
    let mut notes = vec![
        "Pool contains only the internal classical learners; published absolute".to_string(),
        "scores that relied on wider pools (ES-RNN, Auto-ARIMA members) are not".to_string(),
        "expected to reproduce. Methods marked with * are externally published".to_string(),
        "scores injected for ranking only.".to_string(),
    ];
    if let Some(path) = external_scores {
        let external = read_score_table(path)?;
        table = merge_external_scores(&table, &external)?;
        notes.push(format!("External scores read from {}.", path.display()));
    }
    let ranks = if table.methods.len() >= 2 {
        Some(schulze_rank(&table)?)
    } else {
        None
    };
    let mut text = render_table("Mean OWA (official test split)", &table, ranks.as_ref(), false);
    text.push('\n');
    text.push_str(&render_table(
        "Median OWA (official test split)",
        &median_table,
        None,
        true,
    ));
    text.push('\n');
    if let Ok(cv) = fs::read_to_string(paths.cv_scores()) {
        text.push_str("Cross-validation mean weighted loss (out-of-fold):\n");
        text.push_str(&cv);
        text.push('\n');
    }
    for note in &notes {
        text.push_str("note: ");
        text.push_str(note);
        text.push('\n');
    }
    fs::write(paths.report(), &text)?;
    Ok(text)
}
