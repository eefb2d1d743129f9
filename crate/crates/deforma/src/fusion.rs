//! Fusion baselines: uniform averaging, the per-series oracle, and a
//! feature-based MLP weigher trained with cross-entropy against the
//! best base learner.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::TimeSeries;
use crate::error::{Error, Result};
use crate::features::{extract_features, fit_scaler, FeatureScaler, FeatureVector, FEATURE_NAMES};
use crate::metrics::ErrorMatrix;
use crate::model::{EpochStats, TrainingConfig, TrainingHistory, WeightVector};
use crate::nn::{checkpoint, graph::Graph, optim::he_init, Adam, Constraint, Parameter, Tensor};

/// The fusion strategies compared by the experiment harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionMethodId {
    Avg,
    OracleBest,
    FformaN,
    Deforma,
}

impl FusionMethodId {
    pub fn name(self) -> &'static str {
        match self {
            FusionMethodId::Avg => "AVG",
            FusionMethodId::OracleBest => "OracleBest",
            FusionMethodId::FformaN => "FFORMA-N",
            FusionMethodId::Deforma => "DeFORMA",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "AVG" => Ok(FusionMethodId::Avg),
            "OracleBest" => Ok(FusionMethodId::OracleBest),
            "FFORMA-N" => Ok(FusionMethodId::FformaN),
            "DeFORMA" => Ok(FusionMethodId::Deforma),
            other => Err(Error::Config(format!("unknown fusion method '{other}'"))),
        }
    }
}

/// Unweighted mean of the pool forecasts.
pub fn avg_fuse(forecasts: &[Vec<f64>]) -> Result<Vec<f64>> {
    if forecasts.is_empty() {
        return Err(Error::argument("avg_fuse needs at least one forecast"));
    }
    let weights = WeightVector::uniform(forecasts.len());
    crate::model::fuse_forecast(&weights, forecasts)
}

/// Index of the learner with the lowest error; ties resolve to the
/// lowest index.
pub fn oracle_best(error_row: &[f64]) -> Result<usize> {
    if error_row.is_empty() {
        return Err(Error::argument("oracle_best needs a nonempty error row"));
    }
    if error_row.iter().any(|e| !e.is_finite()) {
        return Err(Error::validation("<error row>", "non-finite error"));
    }
    let mut best = 0;
    for (i, &e) in error_row.iter().enumerate().skip(1) {
        if e < error_row[best] {
            best = i;
        }
    }
    Ok(best)
}

const HIDDEN1: usize = 64;
const HIDDEN2: usize = 32;
const DROPOUT: f64 = 0.1;

/// Feature-based MLP weigher: 16 z-scored features through two hidden
/// rectifier layers (64, 32) into softmax pool weights, trained with
/// cross-entropy against the one-hot best learner.
pub struct FformaN {
    pub n_learners: usize,
    pub scaler: FeatureScaler,
    pub params: Vec<Parameter>,
}

/// Meta-training rows for the feature baseline: raw features aligned
/// with per-learner error targets.
pub struct FeatureTable {
    pub ids: Vec<String>,
    pub features: Vec<FeatureVector>,
    pub best: Vec<usize>,
}

impl FeatureTable {
    /// Extracts features for every series present in the error matrix,
    /// using the same holdout prefix the errors were computed on.
    pub fn build(dataset: &[TimeSeries], targets: &ErrorMatrix) -> Result<Self> {
        let mut ids = Vec::new();
        let mut features = Vec::new();
        let mut best = Vec::new();
        for id in &targets.series_order {
            let series = dataset
                .iter()
                .find(|s| s.id == *id)
                .ok_or_else(|| Error::validation(id, "series missing from dataset"))?;
            let horizon = series.frequency.horizon();
            let prefix = &series.train[..series.train.len() - horizon];
            let view = TimeSeries::new(
                series.id.clone(),
                series.frequency,
                series.domain_tag.clone(),
                prefix.to_vec(),
                None,
            )?;
            ids.push(id.clone());
            features.push(extract_features(&view)?);
            best.push(oracle_best(targets.row(id).unwrap())?);
        }
        if ids.is_empty() {
            return Err(Error::Dataset("empty feature table".to_string()));
        }
        Ok(FeatureTable { ids, features, best })
    }
}

impl FformaN {
    fn init_params(n_learners: usize, seed: u64) -> Vec<Parameter> {
        let d = FEATURE_NAMES.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            Parameter::new("dense1.weights", he_init(vec![HIDDEN1, d], d, &mut rng), Constraint::None),
            Parameter::new("dense1.bias", Tensor::zeros(vec![HIDDEN1]), Constraint::None),
            Parameter::new(
                "dense2.weights",
                he_init(vec![HIDDEN2, HIDDEN1], HIDDEN1, &mut rng),
                Constraint::None,
            ),
            Parameter::new("dense2.bias", Tensor::zeros(vec![HIDDEN2]), Constraint::None),
            Parameter::new(
                "dense3.weights",
                he_init(vec![n_learners, HIDDEN2], HIDDEN2, &mut rng),
                Constraint::None,
            ),
            Parameter::new("dense3.bias", Tensor::zeros(vec![n_learners]), Constraint::None),
        ]
    }

    pub fn new(n_learners: usize, scaler: FeatureScaler, seed: u64) -> Result<Self> {
        if n_learners < 2 {
            return Err(Error::Config("n_learners must be >= 2".to_string()));
        }
        Ok(FformaN {
            n_learners,
            scaler,
            params: Self::init_params(n_learners, seed),
        })
    }

    fn forward(
        &self,
        features: &FeatureVector,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Graph, crate::nn::NodeId, Vec<crate::nn::NodeId>)> {
        let scaled = self.scaler.apply(features);
        let mut graph = Graph::new();
        let leaves: Vec<crate::nn::NodeId> = self
            .params
            .iter()
            .map(|p| graph.parameter(p.value.clone()))
            .collect();
        let x = graph.constant(Tensor::vector(scaled.values));
        let h = graph.dense(x, leaves[0], leaves[1])?;
        let h = graph.relu(h);
        let h = graph.spatial_dropout(h, DROPOUT, training, rng)?;
        let h = graph.dense(h, leaves[2], leaves[3])?;
        let h = graph.relu(h);
        let h = graph.spatial_dropout(h, DROPOUT, training, rng)?;
        let logits = graph.dense(h, leaves[4], leaves[5])?;
        let weights = graph.softmax(logits)?;
        Ok((graph, weights, leaves))
    }

    /// Deterministic inference (dropout off).
    pub fn predict_weights(&self, features: &FeatureVector) -> Result<WeightVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (graph, weights, _) = self.forward(features, false, &mut rng)?;
        WeightVector::new(graph.value(weights).data.clone())
    }

    pub fn save(&self, path: &Path, extra_meta: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra_meta.clone();
        meta.insert("model".to_string(), "fforma-n".to_string());
        meta.insert("n_learners".to_string(), self.n_learners.to_string());
        let mut params = self.params.clone();
        params.push(Parameter::new(
            "scaler.means",
            Tensor::vector(self.scaler.means.clone()),
            Constraint::None,
        ));
        params.push(Parameter::new(
            "scaler.scales",
            Tensor::vector(self.scaler.scales.clone()),
            Constraint::None,
        ));
        checkpoint::save(path, &meta, &params)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let (meta, mut params) = checkpoint::load(path)?;
        let n_learners: usize = meta
            .get("n_learners")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config("checkpoint missing n_learners".to_string()))?;
        let scales = params.pop().ok_or_else(|| Error::Config("truncated checkpoint".to_string()))?;
        let means = params.pop().ok_or_else(|| Error::Config("truncated checkpoint".to_string()))?;
        if means.name != "scaler.means" || scales.name != "scaler.scales" {
            return Err(Error::Config("checkpoint is not an fforma-n model".to_string()));
        }
        Ok((
            FformaN {
                n_learners,
                scaler: FeatureScaler {
                    means: means.value.data,
                    scales: scales.value.data,
                },
                params,
            },
            meta,
        ))
    }
}

/// Trains the feature baseline. Targets are one-hot on the best
/// learner; a degenerate table where one learner always wins is
/// allowed but logged.
pub fn train_fforma_n(
    dataset: &[TimeSeries],
    targets: &ErrorMatrix,
    tcfg: &TrainingConfig,
) -> Result<(FformaN, TrainingHistory)> {
    let table = FeatureTable::build(dataset, targets)?;
    let first = table.best[0];
    if table.best.iter().all(|&b| b == first) {
        log::warn!(
            "fforma-n targets are single-class: '{}' wins every series",
            targets.learner_ids[first]
        );
    }
    let scaler = fit_scaler(&table.features)?;
    let mut model = FformaN::new(targets.learner_ids.len(), scaler, tcfg.seed)?;

    let n = table.ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    order.shuffle(&mut split_rng);
    let n_val = (((n as f64) * tcfg.validation_fraction).round() as usize).min(n - 1);
    let val_indices: Vec<usize> = order[..n_val].to_vec();
    let train_indices: Vec<usize> = order[n_val..].to_vec();

    let pass = |model: &FformaN,
                indices: &[usize],
                training: bool,
                epoch: usize|
     -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut loss_sum = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for &i in indices {
            let mut rng =
                ChaCha8Rng::seed_from_u64(tcfg.seed ^ ((epoch as u64) << 32) ^ i as u64);
            let (mut graph, weights, leaves) = model.forward(&table.features[i], training, &mut rng)?;
            let p_best = graph.index(weights, table.best[i])?;
            let logp = graph.ln(p_best)?;
            let loss = graph.neg(logp);
            let loss_value = graph.value(loss).data[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: 0,
                    lr: tcfg.learning_rate,
                    reason: format!("non-finite loss on series '{}'", table.ids[i]),
                });
            }
            loss_sum += loss_value;
            if training {
                let node_grads = graph.backward(loss)?;
                let acc = grads.get_or_insert_with(|| {
                    model
                        .params
                        .iter()
                        .map(|p| Tensor::zeros(p.value.shape.clone()))
                        .collect()
                });
                for (slot, leaf) in acc.iter_mut().zip(&leaves) {
                    if let Some(g) = &node_grads[leaf.0] {
                        slot.add_assign(g);
                    }
                }
            }
        }
        let scale = 1.0 / indices.len().max(1) as f64;
        if let Some(grads) = &mut grads {
            grads.iter_mut().for_each(|g| g.scale(scale));
        }
        Ok((loss_sum * scale, grads))
    };

    let mut adam = Adam::new(&model.params, tcfg.learning_rate);
    let mut history = TrainingHistory::default();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<Parameter>> = None;
    let mut since_best = 0usize;
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));
    for epoch in 0..tcfg.max_epochs {
        let mut shuffled = train_indices.clone();
        shuffled.shuffle(&mut epoch_rng);
        let mut train_loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in shuffled.chunks(tcfg.batch_size) {
            let (loss, grads) = pass(&model, batch, true, epoch)?;
            for (param, grad) in model.params.iter_mut().zip(grads.expect("training gradients")) {
                param.grad = grad;
            }
            adam.step(&mut model.params);
            train_loss_sum += loss;
            batches += 1;
        }
        let train_loss = train_loss_sum / batches.max(1) as f64;
        let val_loss = if val_indices.is_empty() {
            train_loss
        } else {
            pass(&model, &val_indices, false, epoch)?.0
        };
        history.epochs.push(EpochStats { train_loss, val_loss });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = Some(model.params.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > tcfg.patience {
                break;
            }
        }
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    Ok((model, history))
}
