//! The constrained-convolution 1D ResNet fusion model: temporal heads,
//! backbone, weighted-error loss, training loop and forecast fusion.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{pad_values, PaddedInput, TimeSeries};
use crate::error::{Error, Result};
use crate::learners::{internal_forecast, LearnerSource};
use crate::metrics::{build_error_matrix, ErrorMatrix};
use crate::nn::{
    apply_constraints, checkpoint, graph::Graph, optim::he_init, Adam, Constraint, NodeId,
    Padding, Parameter, Tensor,
};

/// Constrained temporal head in front of the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemporalHeadKind {
    /// Kernel S+1, weights sum to zero (trend removal).
    Differencing,
    /// Kernel S, weights sum to one (seasonality removal).
    MovingAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalHeadSpec {
    pub kind: TemporalHeadKind,
    pub filters: usize,
    pub kernel: usize,
    pub constraint: Constraint,
}

impl TemporalHeadSpec {
    pub fn for_period(kind: TemporalHeadKind, filters: usize, seasonal_period: usize) -> Self {
        match kind {
            TemporalHeadKind::Differencing => TemporalHeadSpec {
                kind,
                filters,
                kernel: seasonal_period + 1,
                constraint: Constraint::SumToZero,
            },
            TemporalHeadKind::MovingAverage => TemporalHeadSpec {
                kind,
                filters,
                kernel: seasonal_period,
                constraint: Constraint::SumToOne,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchitectureConfig {
    /// Number of stride-2 sites actually halving (1..=5).
    pub halvings: usize,
    pub conv_filters: usize,
    pub meta_features: usize,
    pub max_length: usize,
    pub dropout_rate: f64,
    pub n_learners: usize,
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.halvings) {
            return Err(Error::Config(format!("halvings {} outside [1,5]", self.halvings)));
        }
        if self.conv_filters == 0 || self.meta_features == 0 || self.max_length == 0 {
            return Err(Error::Config("zero-sized architecture dimension".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        if self.n_learners < 2 {
            return Err(Error::Config("n_learners must be >= 2".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 92,
            max_epochs: 150,
            patience: 20,
            validation_fraction: 0.10,
            seed: 42,
        }
    }
}

/// Softmax output over the learner pool: a convex combination.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || weights.iter().any(|w| !(0.0..=1.0 + 1e-9).contains(w)) {
            return Err(Error::Validation {
                id: "<weights>".to_string(),
                reason: format!("not a convex combination (sum {sum})"),
            });
        }
        Ok(WeightVector { weights })
    }

    pub fn uniform(k: usize) -> Self {
        WeightVector {
            weights: vec![1.0 / k as f64; k],
        }
    }
}

struct BlockLayout {
    conv1: usize,
    gain1: usize,
    offset1: usize,
    conv2: usize,
    gain2: usize,
    offset2: usize,
    projection: Option<usize>,
    stride: usize,
}

struct Layout {
    diff_conv: usize,
    diff_gain: usize,
    diff_offset: usize,
    ma_conv: usize,
    ma_gain: usize,
    ma_offset: usize,
    stem_conv: usize,
    stem_gain: usize,
    stem_offset: usize,
    blocks: Vec<BlockLayout>,
    dense1_w: usize,
    dense1_b: usize,
    dense2_w: usize,
    dense2_b: usize,
}

/// DeFORMA: two constrained temporal heads in parallel on the raw
/// input, channel-concatenated into a width-64 1D ResNet-18 with capped
/// stride-2 sites, global max pooling and a softmax weighting output.
pub struct DeformaModel {
    pub arch: ArchitectureConfig,
    pub seasonal_period: usize,
    pub params: Vec<Parameter>,
    /// Strides of the five reduction sites in network order:
    /// stem conv, stem pool, stage 2-4 transitions.
    pub site_strides: [usize; 5],
    layout: Layout,
}

fn site_strides(halvings: usize) -> [usize; 5] {
    let mut strides = [1usize; 5];
    for s in strides.iter_mut().take(halvings) {
        *s = 2;
    }
    strides
}

impl DeformaModel {
    /// Builds and initializes the model. Fails when a head kernel does
    /// not fit the input or any intermediate feature map would be
    /// shorter than one step.
    pub fn build(arch: ArchitectureConfig, seasonal_period: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        let diff = TemporalHeadSpec::for_period(
            TemporalHeadKind::Differencing,
            arch.conv_filters,
            seasonal_period,
        );
        let ma = TemporalHeadSpec::for_period(
            TemporalHeadKind::MovingAverage,
            arch.conv_filters,
            seasonal_period,
        );
        if arch.max_length < diff.kernel.max(ma.kernel) {
            return Err(Error::Config(format!(
                "max_length {} shorter than head kernel {}",
                arch.max_length,
                diff.kernel.max(ma.kernel)
            )));
        }
        let strides = site_strides(arch.halvings);
        // Shape audit: with Same padding every site maps L to
        // ceil(L / stride), so verify each stays >= 1.
        let mut length = arch.max_length;
        for &stride in &strides {
            length = length.div_ceil(stride);
            if length < 1 {
                return Err(Error::Config(
                    "feature map length fell below one step".to_string(),
                ));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let width = arch.conv_filters;
        let push = |params: &mut Vec<Parameter>, p: Parameter| -> usize {
            params.push(p);
            params.len() - 1
        };
        let head = |params: &mut Vec<Parameter>,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        spec: &TemporalHeadSpec|
         -> (usize, usize, usize) {
            let mut conv = Parameter::new(
                format!("{name}.conv"),
                he_init(vec![spec.filters, 1, spec.kernel], spec.kernel, rng),
                spec.constraint,
            );
            apply_constraints(&mut conv);
            let conv = push(params, conv);
            let gain = push(
                params,
                Parameter::new(
                    format!("{name}.ln_gain"),
                    Tensor::vector(vec![1.0; spec.filters]),
                    Constraint::None,
                ),
            );
            let offset = push(
                params,
                Parameter::new(
                    format!("{name}.ln_offset"),
                    Tensor::zeros(vec![spec.filters]),
                    Constraint::None,
                ),
            );
            (conv, gain, offset)
        };
        let (diff_conv, diff_gain, diff_offset) = head(&mut params, &mut rng, "diff_head", &diff);
        let (ma_conv, ma_gain, ma_offset) = head(&mut params, &mut rng, "ma_head", &ma);

        let stem_in = 2 * arch.conv_filters;
        let stem_conv = push(
            &mut params,
            Parameter::new(
                "stem.conv",
                he_init(vec![width, stem_in, 7], stem_in * 7, &mut rng),
                Constraint::None,
            ),
        );
        let stem_gain = push(
            &mut params,
            Parameter::new("stem.ln_gain", Tensor::vector(vec![1.0; width]), Constraint::None),
        );
        let stem_offset = push(
            &mut params,
            Parameter::new("stem.ln_offset", Tensor::zeros(vec![width]), Constraint::None),
        );

        let mut blocks = Vec::new();
        for stage in 0..4 {
            for block in 0..2 {
                let stride = if stage > 0 && block == 0 {
                    strides[stage + 1]
                } else {
                    1
                };
                let prefix = format!("stage{}.block{}", stage + 1, block);
                let conv1 = push(
                    &mut params,
                    Parameter::new(
                        format!("{prefix}.conv1"),
                        he_init(vec![width, width, 3], width * 3, &mut rng),
                        Constraint::None,
                    ),
                );
                let gain1 = push(
                    &mut params,
                    Parameter::new(
                        format!("{prefix}.ln1_gain"),
                        Tensor::vector(vec![1.0; width]),
                        Constraint::None,
                    ),
                );
                let offset1 = push(
                    &mut params,
                    Parameter::new(
                        format!("{prefix}.ln1_offset"),
                        Tensor::zeros(vec![width]),
                        Constraint::None,
                    ),
                );
                let conv2 = push(
                    &mut params,
                    Parameter::new(
                        format!("{prefix}.conv2"),
                        he_init(vec![width, width, 3], width * 3, &mut rng),
                        Constraint::None,
                    ),
                );
                let gain2 = push(
                    &mut params,
                    Parameter::new(
                        format!("{prefix}.ln2_gain"),
                        Tensor::vector(vec![1.0; width]),
                        Constraint::None,
                    ),
                );
                let offset2 = push(
                    &mut params,
                    Parameter::new(
                        format!("{prefix}.ln2_offset"),
                        Tensor::zeros(vec![width]),
                        Constraint::None,
                    ),
                );
                let projection = (stride != 1).then(|| {
                    push(
                        &mut params,
                        Parameter::new(
                            format!("{prefix}.projection"),
                            he_init(vec![width, width, 1], width, &mut rng),
                            Constraint::None,
                        ),
                    )
                });
                blocks.push(BlockLayout {
                    conv1,
                    gain1,
                    offset1,
                    conv2,
                    gain2,
                    offset2,
                    projection,
                    stride,
                });
            }
        }

        let dense1_w = push(
            &mut params,
            Parameter::new(
                "dense1.weights",
                he_init(vec![arch.meta_features, width], width, &mut rng),
                Constraint::None,
            ),
        );
        let dense1_b = push(
            &mut params,
            Parameter::new("dense1.bias", Tensor::zeros(vec![arch.meta_features]), Constraint::None),
        );
        let dense2_w = push(
            &mut params,
            Parameter::new(
                "dense2.weights",
                he_init(vec![arch.n_learners, arch.meta_features], arch.meta_features, &mut rng),
                Constraint::None,
            ),
        );
        let dense2_b = push(
            &mut params,
            Parameter::new("dense2.bias", Tensor::zeros(vec![arch.n_learners]), Constraint::None),
        );

        Ok(DeformaModel {
            arch,
            seasonal_period,
            params,
            site_strides: strides,
            layout: Layout {
                diff_conv,
                diff_gain,
                diff_offset,
                ma_conv,
                ma_gain,
                ma_offset,
                stem_conv,
                stem_gain,
                stem_offset,
                blocks,
                dense1_w,
                dense1_b,
                dense2_w,
                dense2_b,
            },
        })
    }

    /// Feature-map lengths after each reduction site, for shape audits.
    pub fn audit_lengths(&self) -> Vec<usize> {
        let mut lengths = Vec::new();
        let mut length = self.arch.max_length;
        for &stride in &self.site_strides {
            length = length.div_ceil(stride);
            lengths.push(length);
        }
        lengths
    }

    /// Records a forward pass. Returns the graph, the softmax output
    /// node and the graph leaf of every parameter (in `params` order).
    pub fn forward(
        &self,
        input: &PaddedInput,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Graph, NodeId, Vec<NodeId>)> {
        if input.values.len() != self.arch.max_length {
            return Err(Error::Shape(format!(
                "input length {} != max_length {}",
                input.values.len(),
                self.arch.max_length
            )));
        }
        let mut graph = Graph::new();
        let leaves: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| graph.parameter(p.value.clone()))
            .collect();
        let layout = &self.layout;
        let x = graph.constant(Tensor::new(
            vec![1, self.arch.max_length],
            input.values.clone(),
        )?);

        let run_head = |graph: &mut Graph,
                            rng: &mut ChaCha8Rng,
                            conv: usize,
                            gain: usize,
                            offset: usize|
         -> Result<NodeId> {
            let convolved = graph.conv1d(x, leaves[conv], None, 1, Padding::Same)?;
            let normalized = graph.layer_norm(convolved, leaves[gain], leaves[offset])?;
            graph.spatial_dropout(normalized, self.arch.dropout_rate, training, rng)
        };
        let diff = run_head(&mut graph, rng, layout.diff_conv, layout.diff_gain, layout.diff_offset)?;
        let ma = run_head(&mut graph, rng, layout.ma_conv, layout.ma_gain, layout.ma_offset)?;
        let merged = graph.concat_channels(diff, ma)?;

        let stem = graph.conv1d(
            merged,
            leaves[layout.stem_conv],
            None,
            self.site_strides[0],
            Padding::Same,
        )?;
        let stem = graph.layer_norm(stem, leaves[layout.stem_gain], leaves[layout.stem_offset])?;
        let stem = graph.relu(stem);
        let mut activation = graph.max_pool1d(stem, 3, self.site_strides[1], Padding::Same)?;

        for block in &layout.blocks {
            let identity = match block.projection {
                Some(projection) => graph.conv1d(
                    activation,
                    leaves[projection],
                    None,
                    block.stride,
                    Padding::Same,
                )?,
                None => activation,
            };
            let out = graph.conv1d(
                activation,
                leaves[block.conv1],
                None,
                block.stride,
                Padding::Same,
            )?;
            let out = graph.layer_norm(out, leaves[block.gain1], leaves[block.offset1])?;
            let out = graph.relu(out);
            let out = graph.conv1d(out, leaves[block.conv2], None, 1, Padding::Same)?;
            let out = graph.layer_norm(out, leaves[block.gain2], leaves[block.offset2])?;
            let out = graph.add(out, identity)?;
            activation = graph.relu(out);
        }

        let pooled = graph.global_max_pool(activation)?;
        let pooled = graph.spatial_dropout(pooled, self.arch.dropout_rate, training, rng)?;
        let hidden = graph.dense(pooled, leaves[layout.dense1_w], leaves[layout.dense1_b])?;
        let hidden = graph.relu(hidden);
        let logits = graph.dense(hidden, leaves[layout.dense2_w], leaves[layout.dense2_b])?;
        let weights = graph.softmax(logits)?;
        Ok((graph, weights, leaves))
    }

    /// Deterministic inference (dropout off).
    pub fn predict_weights(&self, input: &PaddedInput) -> Result<WeightVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (graph, weights, _) = self.forward(input, false, &mut rng)?;
        WeightVector::new(graph.value(weights).data.clone())
    }

    pub fn save(&self, path: &Path, extra_meta: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra_meta.clone();
        meta.insert("model".to_string(), "deforma".to_string());
        meta.insert("halvings".to_string(), self.arch.halvings.to_string());
        meta.insert("conv_filters".to_string(), self.arch.conv_filters.to_string());
        meta.insert("meta_features".to_string(), self.arch.meta_features.to_string());
        meta.insert("max_length".to_string(), self.arch.max_length.to_string());
        meta.insert(
            "dropout_rate".to_string(),
            crate::data::format_value(self.arch.dropout_rate),
        );
        meta.insert("n_learners".to_string(), self.arch.n_learners.to_string());
        meta.insert("seasonal_period".to_string(), self.seasonal_period.to_string());
        checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let (meta, params) = checkpoint::load(path)?;
        let get = |key: &str| -> Result<String> {
            meta.get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint missing meta key '{key}'")))
        };
        let arch = ArchitectureConfig {
            halvings: get("halvings")?.parse().map_err(|_| Error::Config("bad halvings".into()))?,
            conv_filters: get("conv_filters")?.parse().map_err(|_| Error::Config("bad conv_filters".into()))?,
            meta_features: get("meta_features")?.parse().map_err(|_| Error::Config("bad meta_features".into()))?,
            max_length: get("max_length")?.parse().map_err(|_| Error::Config("bad max_length".into()))?,
            dropout_rate: get("dropout_rate")?.parse().map_err(|_| Error::Config("bad dropout_rate".into()))?,
            n_learners: get("n_learners")?.parse().map_err(|_| Error::Config("bad n_learners".into()))?,
        };
        let seasonal_period: usize = get("seasonal_period")?
            .parse()
            .map_err(|_| Error::Config("bad seasonal_period".into()))?;
        let mut model = DeformaModel::build(arch, seasonal_period, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, architecture expects {}",
                params.len(),
                model.params.len()
            )));
        }
        for (slot, loaded) in model.params.iter_mut().zip(params) {
            if slot.name != loaded.name || slot.value.shape != loaded.value.shape {
                return Err(Error::Config(format!(
                    "checkpoint parameter '{}' does not match expected '{}'",
                    loaded.name, slot.name
                )));
            }
            *slot = loaded;
        }
        Ok((model, meta))
    }
}

/// Mean over the batch of the weighted per-learner error sum.
pub fn fforma_loss(weights: &[WeightVector], error_rows: &[Vec<f64>]) -> Result<f64> {
    if weights.is_empty() || weights.len() != error_rows.len() {
        return Err(Error::argument("fforma_loss needs matching nonempty batches"));
    }
    let mut total = 0.0;
    for (w, row) in weights.iter().zip(error_rows) {
        if w.weights.len() != row.len() {
            return Err(Error::argument("learner count mismatch in fforma_loss"));
        }
        if row.iter().any(|&e| e < 0.0) {
            return Err(Error::Validation {
                id: "<error row>".to_string(),
                reason: "negative error contribution".to_string(),
            });
        }
        total += w.weights.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total / weights.len() as f64)
}

/// Convex combination of learner forecasts per step.
pub fn fuse_forecast(weights: &WeightVector, forecasts: &[Vec<f64>]) -> Result<Vec<f64>> {
    if forecasts.len() != weights.weights.len() {
        return Err(Error::Shape(format!(
            "{} forecasts for {} weights",
            forecasts.len(),
            weights.weights.len()
        )));
    }
    let horizon = forecasts.first().map(|f| f.len()).unwrap_or(0);
    if forecasts.iter().any(|f| f.len() != horizon) {
        return Err(Error::Shape("ragged forecast matrix".to_string()));
    }
    let mut fused = vec![0.0; horizon];
    for (w, forecast) in weights.weights.iter().zip(forecasts) {
        for (out, &f) in fused.iter_mut().zip(forecast) {
            *out += w * f;
        }
    }
    Ok(fused)
}

/// Meta-training data: padded model inputs aligned with per-learner
/// error targets.
#[derive(Debug, Clone)]
pub struct TrainingTable {
    pub ids: Vec<String>,
    pub inputs: Vec<PaddedInput>,
    pub targets: ErrorMatrix,
    pub skipped: usize,
}

/// A learner's role in training-table construction: internal learners
/// are refit on the holdout prefix; precomputed learners need a
/// holdout-forecast CSV.
pub struct TableLearner {
    pub id: String,
    pub source: LearnerSource,
    pub holdout_forecasts: Option<HashMap<String, Vec<f64>>>,
}

/// Builds the meta-training table by temporal holdout: the last h
/// training points become the meta-truth, learners are fit on the
/// prefix, and per-learner OWA against the meta-truth forms the target
/// row. Series whose prefix cannot support a learner are skipped with a
/// log line.
pub fn make_training_table(
    dataset: &[TimeSeries],
    learners: &[TableLearner],
    max_length: usize,
) -> Result<TrainingTable> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".to_string()));
    }
    let period = dataset[0].frequency.seasonal_period();
    let horizon = dataset[0].frequency.horizon();

    let per_series: Vec<Option<(String, PaddedInput, Vec<Vec<f64>>, Vec<f64>, Vec<f64>)>> = dataset
        .par_iter()
        .map(|series| {
            let n = series.train.len();
            if n <= horizon {
                log::info!("skipping '{}': length {n} <= horizon {horizon}", series.id);
                return None;
            }
            let prefix = &series.train[..n - horizon];
            let truth = series.train[n - horizon..].to_vec();
            let mut rows = Vec::with_capacity(learners.len());
            for learner in learners {
                let forecast = match &learner.holdout_forecasts {
                    Some(map) => match map.get(&series.id) {
                        Some(f) if f.len() == horizon => f.clone(),
                        _ => {
                            log::info!(
                                "skipping '{}': no holdout forecasts for '{}'",
                                series.id,
                                learner.id
                            );
                            return None;
                        }
                    },
                    None => match internal_forecast(&learner.source, prefix, horizon, period) {
                        Ok(f) => f,
                        Err(e) => {
                            log::info!("skipping '{}': learner '{}': {e}", series.id, learner.id);
                            return None;
                        }
                    },
                };
                rows.push(forecast);
            }
            Some((
                series.id.clone(),
                pad_values(prefix, max_length),
                rows,
                truth,
                prefix.to_vec(),
            ))
        })
        .collect();

    let mut ids = Vec::new();
    let mut inputs = Vec::new();
    let mut forecast_rows = HashMap::new();
    let mut truths = HashMap::new();
    let mut trains = HashMap::new();
    let mut skipped = 0;
    for entry in per_series {
        match entry {
            Some((id, input, rows, truth, prefix)) => {
                forecast_rows.insert(id.clone(), rows);
                truths.insert(id.clone(), truth);
                trains.insert(id.clone(), prefix);
                ids.push(id);
                inputs.push(input);
            }
            None => skipped += 1,
        }
    }
    if ids.is_empty() {
        return Err(Error::Dataset(
            "every series was skipped while building the training table".to_string(),
        ));
    }
    let matrix = crate::learners::ForecastMatrix {
        learner_ids: learners.iter().map(|l| l.id.clone()).collect(),
        rows: forecast_rows,
        series_order: ids.clone(),
    };
    // Metric-degenerate series (zero Naive2 scale) are dropped too.
    let mut keep = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let single = crate::learners::ForecastMatrix {
            learner_ids: matrix.learner_ids.clone(),
            rows: HashMap::from([(id.clone(), matrix.rows[id].clone())]),
            series_order: vec![id.clone()],
        };
        match build_error_matrix(&single, &truths, &trains, period) {
            Ok(_) => keep.push(i),
            Err(Error::Degenerate { id, reason }) => {
                log::warn!("excluding degenerate series '{id}': {reason}");
                skipped += 1;
            }
            Err(other) => return Err(other),
        }
    }
    let kept_ids: Vec<String> = keep.iter().map(|&i| ids[i].clone()).collect();
    let kept_inputs: Vec<PaddedInput> = keep.iter().map(|&i| inputs[i].clone()).collect();
    let kept_matrix = crate::learners::ForecastMatrix {
        learner_ids: matrix.learner_ids.clone(),
        rows: kept_ids
            .iter()
            .map(|id| (id.clone(), matrix.rows[id].clone()))
            .collect(),
        series_order: kept_ids.clone(),
    };
    if kept_ids.is_empty() {
        return Err(Error::Dataset(
            "every series was degenerate while building the training table".to_string(),
        ));
    }
    let targets = build_error_matrix(&kept_matrix, &truths, &trains, period)?;
    Ok(TrainingTable {
        ids: kept_ids,
        inputs: kept_inputs,
        targets,
        skipped,
    })
}

/// Per-epoch loss record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
}

fn sample_rng_seed(base: u64, epoch: usize, sample: usize) -> u64 {
    // splitmix-style mixing for decorrelated, scheduling-independent seeds
    let mut z = base
        .wrapping_add((epoch as u64).wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add((sample as u64).wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Computes loss and, when `with_grads`, parameter gradients for a
/// slice of samples. Gradient order matches `model.params`.
fn batch_pass(
    model: &DeformaModel,
    table: &TrainingTable,
    indices: &[usize],
    training: bool,
    epoch: usize,
    seed: u64,
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor>>)> {
    // Fixed chunking keeps float summation order independent of thread
    // scheduling, which run-level determinism depends on.
    let chunk_size = indices.len().div_ceil(8).max(1);
    let chunks: Vec<&[usize]> = indices.chunks(chunk_size).collect();
    let partials: Vec<Result<(f64, Option<Vec<Tensor>>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut loss_sum = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for &i in *chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_rng_seed(seed, epoch, i));
                let (mut graph, weights, leaves) = model.forward(&table.inputs[i], training, &mut rng)?;
                let errors = table.targets.row(&table.ids[i]).unwrap().to_vec();
                let loss = graph.dot_const(weights, errors)?;
                let loss_value = graph.value(loss).data[0];
                if !loss_value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: 0,
                        lr: 0.0,
                        reason: format!("non-finite loss on series '{}'", table.ids[i]),
                    });
                }
                loss_sum += loss_value;
                if with_grads {
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
            Ok((loss_sum, grads))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut total_grads: Option<Vec<Tensor>> = None;
    for partial in partials {
        let (loss, grads) = partial?;
        total_loss += loss;
        if let Some(grads) = grads {
            match &mut total_grads {
                Some(acc) => {
                    for (slot, g) in acc.iter_mut().zip(&grads) {
                        slot.add_assign(g);
                    }
                }
                None => total_grads = Some(grads),
            }
        }
    }
    let scale = 1.0 / indices.len() as f64;
    if let Some(grads) = &mut total_grads {
        for g in grads.iter_mut() {
            g.scale(scale);
        }
    }
    Ok((total_loss * scale, total_grads))
}

/// Mini-batch Adam on the weighted-error loss with constraint
/// projection after every step, a held-out validation split, patience
/// early stopping and best-checkpoint restore.
pub fn train(
    model: &mut DeformaModel,
    table: &TrainingTable,
    tcfg: &TrainingConfig,
) -> Result<TrainingHistory> {
    if table.ids.is_empty() {
        return Err(Error::Dataset("empty training table".to_string()));
    }
    let n = table.ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    order.shuffle(&mut split_rng);
    let n_val = ((n as f64) * tcfg.validation_fraction).round() as usize;
    let n_val = n_val.min(n - 1);
    let val_indices: Vec<usize> = order[..n_val].to_vec();
    let train_indices: Vec<usize> = order[n_val..].to_vec();

    let mut adam = Adam::new(&model.params, tcfg.learning_rate);
    let mut history = TrainingHistory::default();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<Parameter>> = None;
    let mut epochs_since_best = 0usize;
    let mut epoch_rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(1));

    for epoch in 0..tcfg.max_epochs {
        let mut shuffled = train_indices.clone();
        shuffled.shuffle(&mut epoch_rng);
        let mut train_loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_no, batch) in shuffled.chunks(tcfg.batch_size).enumerate() {
            let (loss, grads) =
                batch_pass(model, table, batch, true, epoch, tcfg.seed, true).map_err(|e| {
                    match e {
                        Error::Diverged { reason, .. } => Error::Diverged {
                            epoch,
                            batch: batch_no,
                            lr: tcfg.learning_rate,
                            reason,
                        },
                        other => other,
                    }
                })?;
            let grads = grads.expect("training pass computes gradients");
            for (param, grad) in model.params.iter_mut().zip(grads) {
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
            batch_pass(model, table, &val_indices, false, epoch, tcfg.seed, false)?.0
        };
        history.epochs.push(EpochStats {
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_params = Some(model.params.clone());
            history.best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best > tcfg.patience {
                break;
            }
        }
    }
    if let Some(best) = best_params {
        model.params = best;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FrequencyClass;
    use rand::Rng;

    fn small_arch(n_learners: usize) -> ArchitectureConfig {
        ArchitectureConfig {
            halvings: 5,
            conv_filters: 8,
            meta_features: 16,
            max_length: 32,
            dropout_rate: 0.1,
            n_learners,
        }
    }

    #[test]
    fn head_specs_follow_seasonality() {
        let diff = TemporalHeadSpec::for_period(TemporalHeadKind::Differencing, 64, 12);
        assert_eq!(diff.kernel, 13);
        assert_eq!(diff.constraint, Constraint::SumToZero);
        let ma = TemporalHeadSpec::for_period(TemporalHeadKind::MovingAverage, 64, 12);
        assert_eq!(ma.kernel, 12);
        assert_eq!(ma.constraint, Constraint::SumToOne);
    }

    #[test]
    fn build_audits_shapes() {
        let model = DeformaModel::build(small_arch(3), 1, 7).unwrap();
        let lengths = model.audit_lengths();
        assert_eq!(lengths, vec![16, 8, 4, 2, 1]);
        assert!(lengths.iter().all(|&l| l >= 1));
    }

    #[test]
    fn halvings_cap_orders_sites() {
        let mut arch = small_arch(3);
        arch.halvings = 2;
        let model = DeformaModel::build(arch, 1, 7).unwrap();
        assert_eq!(model.site_strides, [2, 2, 1, 1, 1]);
        assert_eq!(model.audit_lengths(), vec![16, 8, 8, 8, 8]);
    }

    #[test]
    fn head_kernel_must_fit() {
        let mut arch = small_arch(3);
        arch.max_length = 8;
        // Hourly period 24 -> kernel 25 > 8.
        assert!(DeformaModel::build(arch, 24, 7).is_err());
    }

    #[test]
    fn output_is_convex_weights() {
        let model = DeformaModel::build(small_arch(9), 1, 7).unwrap();
        let input = pad_values(&[1.0, 5.0, 2.0, 8.0], 32);
        let w = model.predict_weights(&input).unwrap();
        let sum: f64 = w.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert_eq!(w.weights.len(), 9);
    }

    #[test]
    fn prediction_deterministic() {
        let model = DeformaModel::build(small_arch(4), 1, 7).unwrap();
        let input = pad_values(&[3.0, 1.0, 4.0, 1.0, 5.0], 32);
        let a = model.predict_weights(&input).unwrap();
        let b = model.predict_weights(&input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zeroed_final_layer_gives_uniform_weights() {
        let mut model = DeformaModel::build(small_arch(5), 1, 7).unwrap();
        let n = model.params.len();
        for p in &mut model.params[n - 2..] {
            for v in &mut p.value.data {
                *v = 0.0;
            }
        }
        let input = pad_values(&[2.0, 9.0, 4.0], 32);
        let w = model.predict_weights(&input).unwrap();
        for v in &w.weights {
            assert!((v - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn parameter_count_matches_hand_formula() {
        let arch = ArchitectureConfig {
            halvings: 5,
            conv_filters: 64,
            meta_features: 40,
            max_length: 64,
            dropout_rate: 0.1,
            n_learners: 9,
        };
        let model = DeformaModel::build(arch, 12, 7).unwrap();
        let total: usize = model.params.iter().map(|p| p.value.len()).sum();
        // Hand count from the layer formulas.
        let f = 64usize;
        let heads = f * 13 + 2 * f + f * 12 + 2 * f; // convs + layer norm affine
        let stem = f * (2 * f) * 7 + 2 * f;
        let block = 2 * (f * f * 3) + 4 * f;
        let projections = 3 * (f * f); // stride-2 transitions at stages 2-4
        let dense = 40 * f + 40 + 9 * 40 + 9;
        assert_eq!(total, heads + stem + 8 * block + projections + dense);
    }

    #[test]
    fn differencing_head_constant_response_zero() {
        // Sum-to-zero kernel on a constant input (away from the padded
        // boundary) gives exactly zero before normalization.
        let mut graph = Graph::new();
        let x = graph.constant(Tensor::new(vec![1, 10], vec![5.0; 10]).unwrap());
        let mut kernel = Parameter::new(
            "k",
            Tensor::new(vec![1, 1, 3], vec![0.4, 0.1, 0.5]).unwrap(),
            Constraint::SumToZero,
        );
        apply_constraints(&mut kernel);
        let w = graph.parameter(kernel.value.clone());
        let y = graph.conv1d(x, w, None, 1, Padding::Valid).unwrap();
        for v in &graph.value(y).data {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn ma_head_constant_response_identity() {
        let mut graph = Graph::new();
        let x = graph.constant(Tensor::new(vec![1, 10], vec![5.0; 10]).unwrap());
        let mut kernel = Parameter::new(
            "k",
            Tensor::new(vec![1, 1, 4], vec![0.4, 0.1, 0.3, 0.1]).unwrap(),
            Constraint::SumToOne,
        );
        apply_constraints(&mut kernel);
        let w = graph.parameter(kernel.value.clone());
        let y = graph.conv1d(x, w, None, 1, Padding::Valid).unwrap();
        for v in &graph.value(y).data {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fforma_loss_selection_limits() {
        let rows = vec![vec![0.3, 0.9], vec![0.5, 0.1]];
        let one_hot = vec![
            WeightVector::new(vec![1.0, 0.0]).unwrap(),
            WeightVector::new(vec![1.0, 0.0]).unwrap(),
        ];
        assert!((fforma_loss(&one_hot, &rows).unwrap() - 0.4).abs() < 1e-12);
        let uniform = vec![WeightVector::uniform(2), WeightVector::uniform(2)];
        assert!((fforma_loss(&uniform, &rows).unwrap() - 0.45).abs() < 1e-12);
    }

    #[test]
    fn fforma_loss_hand_batch() {
        let rows = vec![vec![0.2, 0.8], vec![1.0, 0.4]];
        let w = vec![
            WeightVector::new(vec![0.25, 0.75]).unwrap(),
            WeightVector::new(vec![0.25, 0.75]).unwrap(),
        ];
        let expected = ((0.25 * 0.2 + 0.75 * 0.8) + (0.25 * 1.0 + 0.75 * 0.4)) / 2.0;
        assert!((fforma_loss(&w, &rows).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn fforma_loss_rejects_negative_errors() {
        let rows = vec![vec![-0.1, 0.8]];
        let w = vec![WeightVector::uniform(2)];
        assert!(fforma_loss(&w, &rows).is_err());
    }

    #[test]
    fn fuse_one_hot_and_arithmetic() {
        let forecasts = vec![vec![2.0, 4.0], vec![4.0, 8.0]];
        let one_hot = WeightVector::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(fuse_forecast(&one_hot, &forecasts).unwrap(), vec![4.0, 8.0]);
        let even = WeightVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(fuse_forecast(&even, &forecasts).unwrap(), vec![3.0, 6.0]);
    }

    #[test]
    fn fuse_within_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let k = rng.gen_range(2..5);
            let h = rng.gen_range(1..6);
            let forecasts: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..h).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            let mut raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|w| *w /= sum);
            let fused = fuse_forecast(&WeightVector::new(raw).unwrap(), &forecasts).unwrap();
            for t in 0..h {
                let lo = forecasts.iter().map(|f| f[t]).fold(f64::INFINITY, f64::min);
                let hi = forecasts.iter().map(|f| f[t]).fold(f64::NEG_INFINITY, f64::max);
                assert!(fused[t] >= lo - 1e-9 && fused[t] <= hi + 1e-9);
            }
        }
    }

    fn toy_dataset(n: usize) -> Vec<TimeSeries> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|i| {
                let len = rng.gen_range(12..30);
                let train: Vec<f64> = (0..len)
                    .map(|t| 20.0 + t as f64 * 0.5 + rng.gen_range(-1.0..1.0))
                    .collect();
                TimeSeries::new(format!("s{i}"), FrequencyClass::Yearly, "", train, None).unwrap()
            })
            .collect()
    }

    fn internal(id: &str, source: LearnerSource) -> TableLearner {
        TableLearner {
            id: id.to_string(),
            source,
            holdout_forecasts: None,
        }
    }

    #[test]
    fn training_table_matches_direct_error_matrix() {
        let ds = toy_dataset(20);
        let learners = vec![
            internal("SES", LearnerSource::Ses),
            internal("Holt", LearnerSource::Holt),
        ];
        let table = make_training_table(&ds, &learners, 32).unwrap();
        assert_eq!(table.targets.learner_ids, vec!["SES", "Holt"]);
        // Recompute one cell independently through the metrics pipeline.
        for id in &table.ids {
            let series = ds.iter().find(|s| s.id == *id).unwrap();
            let n = series.train.len();
            let h = series.frequency.horizon();
            let prefix = &series.train[..n - h];
            let truth = &series.train[n - h..];
            let forecast = internal_forecast(&LearnerSource::Ses, prefix, h, 1).unwrap();
            let direct =
                crate::metrics::evaluate_forecast(prefix, truth, &forecast, 1).unwrap();
            let from_table = table.targets.row(id).unwrap()[0];
            assert!(
                (direct.owa - from_table).abs() < 1e-9,
                "series {id}: {} vs {}",
                direct.owa,
                from_table
            );
        }
    }

    #[test]
    fn training_table_skips_short_series() {
        let mut ds = toy_dataset(5);
        ds.push(TimeSeries::new("tiny", FrequencyClass::Yearly, "", vec![1.0; 4], None).unwrap());
        let learners = vec![
            internal("SES", LearnerSource::Ses),
            internal("Naive2", LearnerSource::Naive2),
        ];
        let table = make_training_table(&ds, &learners, 32).unwrap();
        assert!(table.skipped >= 1);
        assert!(!table.ids.contains(&"tiny".to_string()));
    }

    #[test]
    fn patience_zero_stops_after_first_non_improvement() {
        let ds = toy_dataset(12);
        let learners = vec![
            internal("SES", LearnerSource::Ses),
            internal("Naive2", LearnerSource::Naive2),
        ];
        let table = make_training_table(&ds, &learners, 32).unwrap();
        let mut model = DeformaModel::build(small_arch(2), 1, 3).unwrap();
        let tcfg = TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 30,
            patience: 0,
            validation_fraction: 0.25,
            seed: 5,
        };
        let history = train(&mut model, &table, &tcfg).unwrap();
        // Stops one epoch after the best.
        assert_eq!(history.epochs.len(), history.best_epoch + 2.min(history.epochs.len()));
    }

    #[test]
    fn constraints_hold_after_training() {
        let ds = toy_dataset(12);
        let learners = vec![
            internal("SES", LearnerSource::Ses),
            internal("Naive2", LearnerSource::Naive2),
        ];
        let table = make_training_table(&ds, &learners, 32).unwrap();
        let mut model = DeformaModel::build(small_arch(2), 1, 3).unwrap();
        let tcfg = TrainingConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 3,
            patience: 20,
            validation_fraction: 0.2,
            seed: 5,
        };
        train(&mut model, &table, &tcfg).unwrap();
        for p in &model.params {
            match p.constraint {
                Constraint::SumToZero => {
                    let width = p.value.len() / p.value.shape[0];
                    for f in 0..p.value.shape[0] {
                        let sum: f64 = p.value.data[f * width..(f + 1) * width].iter().sum();
                        assert!(sum.abs() <= 1e-6, "{}: filter sum {sum}", p.name);
                    }
                }
                Constraint::SumToOne => {
                    let width = p.value.len() / p.value.shape[0];
                    for f in 0..p.value.shape[0] {
                        let sum: f64 = p.value.data[f * width..(f + 1) * width].iter().sum();
                        assert!((sum - 1.0).abs() <= 1e-6, "{}: filter sum {sum}", p.name);
                    }
                }
                Constraint::None => {}
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_predictions() {
        let model = DeformaModel::build(small_arch(3), 4, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path, &BTreeMap::new()).unwrap();
        let (loaded, meta) = DeformaModel::load(&path).unwrap();
        assert_eq!(meta["model"], "deforma");
        let input = pad_values(&[1.0, 2.0, 3.0, 4.0, 5.0], 32);
        assert_eq!(
            model.predict_weights(&input).unwrap(),
            loaded.predict_weights(&input).unwrap()
        );
    }
}
