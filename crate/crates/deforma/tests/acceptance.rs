//! End-to-end acceptance checks. Each test prints one `ACCEPTANCE n:`
//! line so the suite doubles as a checklist.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deforma::config::ExperimentConfig;
use deforma::data::{pad_values, write_m4_dataset, FrequencyClass, PaddedInput, TimeSeries};
use deforma::fusion::{oracle_best, train_fforma_n};
use deforma::harness::{read_score_table, report, run_experiment, RunPaths};
use deforma::metrics::{aggregate_owa, evaluate_forecast, naive2_forecast, ErrorMatrix};
use deforma::model::{
    fforma_loss, fuse_forecast, train, ArchitectureConfig, DeformaModel, TrainingConfig,
    TrainingTable, WeightVector,
};
use deforma::nn::gradcheck::max_relative_error;
use deforma::nn::graph::Graph;
use deforma::nn::{Adam, Constraint, Padding, Parameter, Tensor};
use deforma::rank::{schulze_rank, ScoreTable};

/// Independently written M4 metric reference. Deliberately kept apart
/// from the library: plain indexed loops over the published formulas.
mod reference {
    pub fn smape(actual: &[f64], forecast: &[f64]) -> f64 {
        let mut total = 0.0;
        for i in 0..actual.len() {
            let denom = actual[i].abs() + forecast[i].abs();
            if denom > 0.0 {
                total += 200.0 * (actual[i] - forecast[i]).abs() / denom;
            }
        }
        total / actual.len() as f64
    }

    fn acf(values: &[f64], max_lag: usize) -> Vec<f64> {
        let n = values.len();
        let mut mean = 0.0;
        for &v in values {
            mean += v;
        }
        mean /= n as f64;
        let mut denom = 0.0;
        for &v in values {
            denom += (v - mean).powi(2);
        }
        let mut out = Vec::new();
        for lag in 1..=max_lag {
            if lag >= n || denom <= 0.0 {
                out.push(0.0);
                continue;
            }
            let mut num = 0.0;
            for t in lag..n {
                num += (values[t] - mean) * (values[t - lag] - mean);
            }
            out.push(num / denom);
        }
        out
    }

    fn seasonal(train: &[f64], m: usize) -> bool {
        if m <= 1 || train.len() < 3 * m {
            return false;
        }
        let r = acf(train, m);
        let mut sum_sq = 0.0;
        for v in &r[..m - 1] {
            sum_sq += v * v;
        }
        let limit = 1.645 * ((1.0 + 2.0 * sum_sq) / train.len() as f64).sqrt();
        r[m - 1].abs() > limit
    }

    /// Classical multiplicative indices normalized to mean one, or None
    /// when the series is treated as non-seasonal.
    fn indices(train: &[f64], m: usize) -> Option<Vec<f64>> {
        if m <= 1 || !seasonal(train, m) {
            return None;
        }
        for &v in train {
            if v <= 0.0 {
                return None;
            }
        }
        let n = train.len();
        let mut trend = vec![f64::NAN; n];
        let half = m / 2;
        if m % 2 == 1 {
            for t in half..n - half {
                let mut w = 0.0;
                for i in t - half..=t + half {
                    w += train[i];
                }
                trend[t] = w / m as f64;
            }
        } else {
            for t in half..n - half {
                let mut w = 0.5 * train[t - half] + 0.5 * train[t + half];
                let mut mid = 0.0;
                for i in t - half + 1..t + half {
                    mid += train[i];
                }
                w += mid;
                trend[t] = w / m as f64;
            }
        }
        let mut sums = vec![0.0; m];
        let mut counts = vec![0usize; m];
        for t in 0..n {
            if trend[t].is_finite() && trend[t] > 0.0 {
                sums[t % m] += train[t] / trend[t];
                counts[t % m] += 1;
            }
        }
        for &c in &counts {
            if c == 0 {
                return None;
            }
        }
        let mut idx = Vec::with_capacity(m);
        for i in 0..m {
            idx.push(sums[i] / counts[i] as f64);
        }
        let mut mean = 0.0;
        for &v in &idx {
            mean += v;
        }
        mean /= m as f64;
        if mean <= 0.0 {
            return None;
        }
        for v in &mut idx {
            *v /= mean;
        }
        Some(idx)
    }

    pub fn naive2(train: &[f64], m: usize, horizon: usize) -> Vec<f64> {
        let idx = indices(train, m);
        let n = train.len();
        let last_adjusted = match &idx {
            Some(idx) => train[n - 1] / idx[(n - 1) % m],
            None => train[n - 1],
        };
        let mut out = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let s = match &idx {
                Some(idx) => idx[(n + h) % m],
                None => 1.0,
            };
            out.push(last_adjusted * s);
        }
        out
    }

    pub fn naive2_insample_mae(train: &[f64], m: usize) -> f64 {
        let idx = indices(train, m);
        let step = |t: usize| -> f64 {
            match &idx {
                Some(idx) => idx[t % m],
                None => 1.0,
            }
        };
        let mut total = 0.0;
        for t in 1..train.len() {
            let adjusted_prev = train[t - 1] / step(t - 1);
            let prediction = adjusted_prev * step(t);
            total += (train[t] - prediction).abs();
        }
        total / (train.len() - 1) as f64
    }

    pub fn mase(train: &[f64], actual: &[f64], forecast: &[f64], m: usize) -> f64 {
        let scale = naive2_insample_mae(train, m);
        let mut mae = 0.0;
        for i in 0..actual.len() {
            mae += (actual[i] - forecast[i]).abs();
        }
        mae /= actual.len() as f64;
        mae / scale
    }

    pub fn owa(method: (f64, f64), reference: (f64, f64)) -> f64 {
        0.5 * (method.0 / reference.0 + method.1 / reference.1)
    }
}

fn announce(n: usize, name: &str, passed: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} ({name}): {} {detail}",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "acceptance criterion {n} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4101);
    let periods = [1usize, 4, 12, 24];
    let mut worst = 0.0f64;
    for case in 0..200 {
        let period = periods[case % periods.len()];
        let len = rng.gen_range(10..=60);
        let amp = rng.gen_range(5.0..40.0);
        let train: Vec<f64> = (0..len)
            .map(|t| {
                let seasonal = 1.0 + 0.4 * ((t % period.max(1)) as f64 / period.max(1) as f64 - 0.5);
                (100.0 + rng.gen_range(-0.5..2.0) * t as f64) * seasonal
                    + rng.gen_range(-amp..amp)
            })
            .map(|v| v.max(1.0))
            .collect();
        let horizon = 6;
        let actual: Vec<f64> = (0..horizon).map(|_| rng.gen_range(50.0..250.0)).collect();
        let forecast: Vec<f64> = (0..horizon).map(|_| rng.gen_range(50.0..250.0)).collect();

        let lib = evaluate_forecast(&train, &actual, &forecast, period).unwrap();
        let ref_smape = reference::smape(&actual, &forecast);
        let ref_mase = reference::mase(&train, &actual, &forecast, period);
        let naive = reference::naive2(&train, period, horizon);
        let ref_owa = reference::owa(
            (ref_smape, ref_mase),
            (
                reference::smape(&actual, &naive),
                reference::mase(&train, &actual, &naive, period),
            ),
        );
        for (got, want) in [(lib.smape, ref_smape), (lib.mase, ref_mase), (lib.owa, ref_owa)] {
            let rel = (got - want).abs() / want.abs().max(1e-300);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-9 && elapsed.as_secs_f64() < 10.0;
    announce(
        1,
        "metric oracle equivalence",
        ok,
        &format!("max relative error {worst:.3e}, elapsed {:.2}s", elapsed.as_secs_f64()),
    );
}

fn seasonal_synthetic(
    n: usize,
    frequency: FrequencyClass,
    seed: u64,
) -> Vec<TimeSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let period = frequency.seasonal_period().max(1);
    let horizon = frequency.horizon();
    (0..n)
        .map(|i| {
            let len = rng.gen_range((3 * period + 10).max(20)..(3 * period + 60).max(70));
            let level = rng.gen_range(80.0..400.0);
            let trend = rng.gen_range(-0.3..1.2);
            let season_amp = rng.gen_range(0.05..0.35);
            let values: Vec<f64> = (0..len + horizon)
                .map(|t| {
                    let phase = (t % period) as f64 / period as f64;
                    let seasonal = 1.0 + season_amp * (2.0 * std::f64::consts::PI * phase).sin();
                    ((level + trend * t as f64) * seasonal + rng.gen_range(-3.0..3.0)).max(1.0)
                })
                .collect();
            TimeSeries::new(
                format!("{}{}", frequency.letter(), i + 1),
                frequency,
                "synthetic",
                values[..len].to_vec(),
                Some(values[len..].to_vec()),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn criterion_2_naive2_self_owa_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut checked = 0usize;
    for frequency in [
        FrequencyClass::Yearly,
        FrequencyClass::Quarterly,
        FrequencyClass::Monthly,
    ] {
        // Round-trip through the M4 file format so ingestion is part of
        // the check.
        let made = seasonal_synthetic(40, frequency, 7000 + frequency.horizon() as u64);
        let train_path = dir.path().join(format!("{frequency}-train.csv"));
        let test_path = dir.path().join(format!("{frequency}-test.csv"));
        write_m4_dataset(&made, &train_path, &test_path).unwrap();
        let info_path = dir.path().join("info.csv");
        std::fs::write(&info_path, "").unwrap();
        let dataset =
            deforma::data::load_m4_dataset(&train_path, &test_path, &info_path, frequency).unwrap();
        assert_eq!(dataset.len(), made.len());

        let period = frequency.seasonal_period();
        let mut method_pairs = Vec::new();
        let mut reference_pairs = Vec::new();
        for series in &dataset {
            let test = series.test.as_ref().unwrap();
            // Library path.
            let lib_forecast = naive2_forecast(&series.train, period, test.len()).unwrap();
            let errors = evaluate_forecast(&series.train, test, &lib_forecast, period).unwrap();
            method_pairs.push((errors.smape, errors.mase));
            // Independent reference path.
            let ref_forecast = reference::naive2(&series.train, period, test.len());
            reference_pairs.push((
                reference::smape(test, &ref_forecast),
                reference::mase(&series.train, test, &ref_forecast, period),
            ));
        }
        let (mean_owa, median_owa) = aggregate_owa(&method_pairs, &reference_pairs).unwrap();
        assert_eq!(
            mean_owa, 1.0,
            "{frequency}: Naive2 self mean OWA {mean_owa} != 1.0 exactly"
        );
        assert_eq!(median_owa, 1.0, "{frequency}: median {median_owa}");
        checked += 1;
    }
    announce(
        2,
        "Naive2 self-OWA",
        checked == 3,
        "mean OWA exactly 1.0 on Y/Q/M synthetic subsets vs independent reference",
    );
}

/// Computes analytic grads and a finite-difference comparison for a
/// graph rebuilt from `params` by `build`.
fn check_layer(
    name: &str,
    params: &mut [Parameter],
    build: impl Fn(&mut Graph, &[deforma::nn::NodeId]) -> deforma::nn::NodeId,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let run = |params: &[Parameter]| -> (Graph, deforma::nn::NodeId, Vec<deforma::nn::NodeId>) {
        let mut graph = Graph::new();
        let leaves: Vec<_> = params.iter().map(|p| graph.parameter(p.value.clone())).collect();
        let out = build(&mut graph, &leaves);
        (graph, out, leaves)
    };
    // Reduce any output to a scalar with a fixed projection.
    let (graph0, out0, _) = run(params);
    let out_len = graph0.value(out0).len();
    let proj: Vec<f64> = (0..out_len).map(|i| 0.3 + 0.1 * ((i % 7) as f64)).collect();

    let (mut graph, out, leaves) = run(params);
    let loss = graph.dot_const(out, proj.clone()).unwrap();
    let grads = graph.backward(loss).unwrap();
    for (p, leaf) in params.iter_mut().zip(&leaves) {
        p.grad = grads[leaf.0].clone().unwrap_or_else(|| Tensor::zeros(p.value.shape.clone()));
    }
    let loss_fn = |params: &[Parameter]| -> f64 {
        let (mut graph, out, _) = run(params);
        let loss = graph.dot_const(out, proj.clone()).unwrap();
        graph.value(loss).data[0]
    };
    let err = max_relative_error(params, loss_fn, 6, 1e-5, rng);
    println!("  gradcheck {name}: max relative error {err:.3e}");
    err
}

fn random_param(name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Parameter {
    let len = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Parameter::new(name, Tensor { shape, data }, Constraint::None)
}

#[test]
fn criterion_3_gradient_checks() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst = 0.0f64;

    // conv1d variants: input [2 x 12] as a parameter too.
    for (tag, stride, padding) in [
        ("conv1d-same-s1", 1usize, Padding::Same),
        ("conv1d-same-s2", 2, Padding::Same),
        ("conv1d-valid", 1, Padding::Valid),
    ] {
        let mut params = vec![
            random_param("x", vec![2, 12], &mut rng),
            random_param("w", vec![3, 2, 3], &mut rng),
            random_param("b", vec![3], &mut rng),
        ];
        worst = worst.max(check_layer(
            tag,
            &mut params,
            |g, leaves| g.conv1d(leaves[0], leaves[1], Some(leaves[2]), stride, padding).unwrap(),
            &mut rng,
        ));
    }

    {
        let mut params = vec![
            random_param("x", vec![6], &mut rng),
            random_param("w", vec![4, 6], &mut rng),
            random_param("b", vec![4], &mut rng),
        ];
        worst = worst.max(check_layer(
            "dense",
            &mut params,
            |g, l| g.dense(l[0], l[1], l[2]).unwrap(),
            &mut rng,
        ));
    }

    {
        let mut params = vec![
            random_param("x", vec![4, 5], &mut rng),
            random_param("gain", vec![4], &mut rng),
            random_param("offset", vec![4], &mut rng),
        ];
        worst = worst.max(check_layer(
            "layer-norm",
            &mut params,
            |g, l| g.layer_norm(l[0], l[1], l[2]).unwrap(),
            &mut rng,
        ));
    }

    {
        let mut params = vec![random_param("x", vec![3, 10], &mut rng)];
        worst = worst.max(check_layer(
            "max-pool1d",
            &mut params,
            |g, l| g.max_pool1d(l[0], 3, 2, Padding::Same).unwrap(),
            &mut rng,
        ));
    }

    {
        let mut params = vec![random_param("x", vec![3, 10], &mut rng)];
        worst = worst.max(check_layer(
            "global-max-pool",
            &mut params,
            |g, l| g.global_max_pool(l[0]).unwrap(),
            &mut rng,
        ));
    }

    {
        let mut params = vec![random_param("x", vec![5], &mut rng)];
        worst = worst.max(check_layer(
            "softmax",
            &mut params,
            |g, l| g.softmax(l[0]).unwrap(),
            &mut rng,
        ));
    }

    // Full DeFORMA graph, batch of 2, length 32: analytic grads summed
    // over both samples against finite differences of the summed loss.
    {
        let arch = ArchitectureConfig {
            halvings: 5,
            conv_filters: 4,
            meta_features: 8,
            max_length: 32,
            dropout_rate: 0.1,
            n_learners: 3,
        };
        let model = DeformaModel::build(arch, 4, 77).unwrap();
        let inputs: Vec<PaddedInput> = (0..2)
            .map(|i| {
                let values: Vec<f64> =
                    (0..28).map(|_| rng.gen_range(1.0..50.0) + i as f64).collect();
                pad_values(&values, 32)
            })
            .collect();
        let errors = [vec![0.3, 0.9, 0.5], vec![0.8, 0.2, 0.4]];
        let mut params = model.params.clone();

        let eval = |params: &[Parameter], with_grads: bool| -> (f64, Vec<Tensor>) {
            let mut probe = DeformaModel::build(arch, 4, 77).unwrap();
            for (slot, p) in probe.params.iter_mut().zip(params) {
                slot.value = p.value.clone();
            }
            let mut total = 0.0;
            let mut grads: Vec<Tensor> = params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape.clone()))
                .collect();
            for (input, errs) in inputs.iter().zip(&errors) {
                let mut drop_rng = ChaCha8Rng::seed_from_u64(0);
                let (mut graph, weights, leaves) =
                    probe.forward(input, false, &mut drop_rng).unwrap();
                let loss = graph.dot_const(weights, errs.clone()).unwrap();
                total += graph.value(loss).data[0];
                if with_grads {
                    let node_grads = graph.backward(loss).unwrap();
                    for (slot, leaf) in grads.iter_mut().zip(&leaves) {
                        if let Some(g) = &node_grads[leaf.0] {
                            slot.add_assign(g);
                        }
                    }
                }
            }
            (total, grads)
        };
        let (_, grads) = eval(&params, true);
        for (p, g) in params.iter_mut().zip(grads) {
            p.grad = g;
        }
        let err = max_relative_error(
            &mut params,
            |params| eval(params, false).0,
            2,
            1e-5,
            &mut rng,
        );
        println!("  gradcheck full-deforma: max relative error {err:.3e}");
        worst = worst.max(err);
    }

    let elapsed = start.elapsed();
    let ok = worst < 1e-4 && elapsed.as_secs_f64() < 60.0;
    announce(
        3,
        "gradient checks",
        ok,
        &format!("max relative error {worst:.3e}, elapsed {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_4_constraint_persistence() {
    let arch = ArchitectureConfig {
        halvings: 5,
        conv_filters: 8,
        meta_features: 8,
        max_length: 32,
        dropout_rate: 0.1,
        n_learners: 3,
    };
    let mut model = DeformaModel::build(arch, 12, 5).unwrap();
    let mut adam = Adam::new(&model.params, 1e-3);
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for _ in 0..1000 {
        for p in &mut model.params {
            for g in &mut p.grad.data {
                *g = rng.gen_range(-1.0..1.0);
            }
        }
        adam.step(&mut model.params);
    }
    let mut worst_zero = 0.0f64;
    let mut worst_one = 0.0f64;
    for p in &model.params {
        let filters = p.value.shape[0];
        let width = p.value.len() / filters;
        for f in 0..filters {
            let sum: f64 = p.value.data[f * width..(f + 1) * width].iter().sum();
            match p.constraint {
                Constraint::SumToZero => worst_zero = worst_zero.max(sum.abs()),
                Constraint::SumToOne => worst_one = worst_one.max((sum - 1.0).abs()),
                Constraint::None => {}
            }
        }
    }
    let ok = worst_zero <= 1e-6 && worst_one <= 1e-6;
    announce(
        4,
        "constraint persistence",
        ok,
        &format!("after 1000 Adam steps: |Σw| ≤ {worst_zero:.2e}, |Σw−1| ≤ {worst_one:.2e}"),
    );
}

/// Motif-labeled synthetic inputs: class decides the shape of the most
/// recent window, and the matching learner has error 0.1 vs 1.0.
fn motif_table(n: usize, seed: u64) -> (TrainingTable, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::new();
    let mut inputs = Vec::new();
    let mut classes = Vec::new();
    let mut per_series = HashMap::new();
    let mut order = Vec::new();
    for i in 0..n {
        let class = i % 3;
        let values: Vec<f64> = (0..32)
            .map(|t| {
                let x = t as f64 / 31.0;
                let shape = match class {
                    0 => 4.0 * x,
                    1 => 4.0 * (1.0 - x),
                    _ => 2.0 * if t % 2 == 0 { 1.0 } else { -1.0 },
                };
                shape + rng.gen_range(-0.15..0.15)
            })
            .collect();
        let id = format!("m{i}");
        let mut row = vec![1.0; 3];
        row[class] = 0.1;
        per_series.insert(id.clone(), row);
        order.push(id.clone());
        ids.push(id);
        inputs.push(pad_values(&values, 32));
        classes.push(class);
    }
    let targets = ErrorMatrix {
        learner_ids: vec!["a".to_string(), "b".to_string(), "c".to_string()],
        per_series,
        series_order: order,
    };
    (
        TrainingTable {
            ids,
            inputs,
            targets,
            skipped: 0,
        },
        classes,
    )
}

#[test]
fn criterion_5_synthetic_concentration() {
    let start = Instant::now();
    let (table, _classes) = motif_table(600, 501);
    let arch = ArchitectureConfig {
        halvings: 5,
        conv_filters: 16,
        meta_features: 32,
        max_length: 32,
        dropout_rate: 0.1,
        n_learners: 3,
    };
    let mut model = DeformaModel::build(arch, 1, 11).unwrap();
    let tcfg = TrainingConfig {
        learning_rate: 1e-2,
        batch_size: 92,
        max_epochs: 150,
        patience: 30,
        validation_fraction: 0.1,
        seed: 42,
    };
    let history = train(&mut model, &table, &tcfg).unwrap();

    let weights: Vec<WeightVector> = table
        .inputs
        .iter()
        .map(|input| model.predict_weights(input).unwrap())
        .collect();
    let rows: Vec<Vec<f64>> = table
        .ids
        .iter()
        .map(|id| table.targets.row(id).unwrap().to_vec())
        .collect();
    let model_loss = fforma_loss(&weights, &rows).unwrap();
    let oracle_loss = rows
        .iter()
        .map(|r| r[oracle_best(r).unwrap()])
        .sum::<f64>()
        / rows.len() as f64;
    let uniform: Vec<WeightVector> = (0..rows.len()).map(|_| WeightVector::uniform(3)).collect();
    let uniform_loss = fforma_loss(&uniform, &rows).unwrap();

    // Separable FFORMA-N variant: three feature-distinct regimes.
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut dataset = Vec::new();
    let mut per_series = HashMap::new();
    let mut order = Vec::new();
    for i in 0..600 {
        let class = i % 3;
        let len = 26 + (i % 4);
        let values: Vec<f64> = (0..len)
            .map(|t| match class {
                0 => 100.0 + 8.0 * t as f64 + rng.gen_range(-1.0..1.0),
                1 => 100.0 + rng.gen_range(-1.0..1.0),
                _ => 100.0 + 30.0 * if t % 2 == 0 { 1.0 } else { -1.0 } + rng.gen_range(-1.0..1.0),
            })
            .collect();
        let id = format!("f{i}");
        let mut row = vec![1.0; 3];
        row[class] = 0.1;
        per_series.insert(id.clone(), row);
        order.push(id.clone());
        dataset.push(TimeSeries::new(id, FrequencyClass::Yearly, "", values, None).unwrap());
    }
    let features_targets = ErrorMatrix {
        learner_ids: vec!["a".to_string(), "b".to_string(), "c".to_string()],
        per_series,
        series_order: order,
    };
    let ncfg = TrainingConfig {
        learning_rate: 1e-2,
        batch_size: 92,
        max_epochs: 150,
        patience: 30,
        validation_fraction: 0.1,
        seed: 9,
    };
    let (fn_model, _) = train_fforma_n(&dataset, &features_targets, &ncfg).unwrap();
    let mut correct = 0usize;
    for series in &dataset {
        let horizon = series.frequency.horizon();
        let prefix = TimeSeries::new(
            series.id.clone(),
            series.frequency,
            "",
            series.train[..series.train.len() - horizon].to_vec(),
            None,
        )
        .unwrap();
        let f = deforma::features::extract_features(&prefix).unwrap();
        let w = fn_model.predict_weights(&f).unwrap();
        let predicted = w
            .weights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let truth = oracle_best(features_targets.row(&series.id).unwrap()).unwrap();
        if predicted == truth {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / dataset.len() as f64;

    let elapsed = start.elapsed();
    let ok = model_loss <= 1.05 * oracle_loss
        && model_loss < uniform_loss
        && accuracy > 0.95
        && elapsed.as_secs_f64() < 15.0 * 60.0;
    announce(
        5,
        "synthetic concentration",
        ok,
        &format!(
            "deforma loss {model_loss:.4} (oracle {oracle_loss:.4}, uniform {uniform_loss:.4}, \
             {} epochs), fforma-n accuracy {accuracy:.3}, elapsed {:.0}s",
            history.epochs.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_schulze_reproduction() {
    // Mean-OWA matrix transcribed from the published comparison.
    let methods = ["AVG", "ES-RNN", "FFORMS", "N-BEATS", "FFORMA-N", "FFORMA", "DeFORMA"];
    let scores = vec![
        vec![0.847, 0.985, 0.860, 0.863, 0.804, 0.856],
        vec![0.440, 1.046, 0.864, 0.836, 0.778, 0.847],
        vec![0.423, 0.981, 0.740, 0.817, 0.752, 0.830],
        vec![0.464, 0.974, 0.703, 0.819, 0.758, 0.800],
        vec![0.428, 0.979, 0.718, 0.813, 0.746, 0.828],
        vec![0.415, 0.983, 0.725, 0.800, 0.732, 0.816],
        vec![0.423, 0.972, 0.700, 0.802, 0.729, 0.810],
    ];
    let table = ScoreTable::new(
        methods.iter().map(|m| m.to_string()).collect(),
        ["H", "D", "W", "M", "Y", "Q"].iter().map(|s| s.to_string()).collect(),
        scores,
    )
    .unwrap();
    let result = schulze_rank(&table).unwrap();
    let published: HashMap<&str, usize> = [
        ("AVG", 8),
        ("ES-RNN", 7),
        ("FFORMS", 4),
        ("N-BEATS", 4),
        ("FFORMA-N", 3),
        ("FFORMA", 2),
        ("DeFORMA", 1),
    ]
    .into_iter()
    .collect();
    let mut mismatches = Vec::new();
    for method in methods {
        let got = result.ranks[method];
        let want = published[method];
        if got != want {
            mismatches.push(format!("{method}: computed {got}, published {want}"));
        }
    }
    // The published column lists ranks 7 and 8 among seven methods,
    // which no "1 + number ranked better" assignment can produce; the
    // computed ranking agrees on positions 1-4 and compresses the tail
    // to 6 and 7.
    announce(
        6,
        "published Schulze rank column",
        mismatches.is_empty(),
        &if mismatches.is_empty() {
            "exact match".to_string()
        } else {
            mismatches.join("; ")
        },
    );
}

/// Heterogeneous Weekly-format synthetic set: trending series punish
/// flat learners, flat series punish trend extrapolation.
fn weekly_desk_dataset(n: usize, seed: u64) -> Vec<TimeSeries> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = FrequencyClass::Weekly.horizon();
    (0..n)
        .map(|i| {
            let len = rng.gen_range(60..160);
            let trending = i % 2 == 0;
            let level = rng.gen_range(100.0..600.0);
            let trend = if trending { rng.gen_range(2.0..6.0) } else { 0.0 };
            let noise = if trending { 2.0 } else { 12.0 };
            let values: Vec<f64> = (0..len + horizon)
                .map(|t| (level + trend * t as f64 + rng.gen_range(-noise..noise)).max(1.0))
                .collect();
            TimeSeries::new(
                format!("W{}", i + 1),
                FrequencyClass::Weekly,
                "synthetic",
                values[..len].to_vec(),
                Some(values[len..].to_vec()),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn criterion_7_desk_scale_weekly_run() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    // Prefer official M4 Weekly files when provided.
    let official = std::env::var_os("M4_DATA_DIR").map(std::path::PathBuf::from);
    let (train_path, test_path, n_series, source) = match official {
        Some(root)
            if root.join("Weekly-train.csv").exists() && root.join("Weekly-test.csv").exists() =>
        {
            (root.join("Weekly-train.csv"), root.join("Weekly-test.csv"), 359, "official")
        }
        _ => {
            let dataset = weekly_desk_dataset(359, 359);
            let train = dir.path().join("Weekly-train.csv");
            let test = dir.path().join("Weekly-test.csv");
            write_m4_dataset(&dataset, &train, &test).unwrap();
            (train, test, 359, "synthetic")
        }
    };
    let cfg = ExperimentConfig::from_str(&format!(
        "data.train_csv = {}\n\
         data.test_csv = {}\n\
         data.subset = W\n\
         pool.learners = SES=ses,Holt=holt,Damped=damped,Comb=comb,Theta=theta\n\
         cv.folds = 2\ncv.repeats = 1\ncv.seed = 42\n\
         arch.halvings = 5\narch.conv_filters = 32\narch.meta_features = 32\n\
         arch.max_length = 32\narch.dropout_rate = 0.1\n\
         train.learning_rate = 0.001\ntrain.batch_size = 92\ntrain.max_epochs = 30\n\
         train.patience = 10\ntrain.validation_fraction = 0.1\ntrain.seed = 42\n\
         methods = AVG,OracleBest,DeFORMA\n\
         out_dir = {}\n",
        train_path.display(),
        test_path.display(),
        dir.path().join("run").display()
    ))
    .unwrap();
    let run = run_experiment(&cfg).unwrap();
    let paths = RunPaths::new(&run);
    let per_series = std::fs::read_to_string(paths.per_series_errors()).unwrap();
    let rows = per_series.lines().count() - 1;
    let table = read_score_table(&paths.mean_scores()).unwrap();
    let avg_idx = table.methods.iter().position(|m| m == "AVG").unwrap();
    let deforma_idx = table.methods.iter().position(|m| m == "DeFORMA").unwrap();
    let avg_owa = table.mean_owa[avg_idx][0];
    let deforma_owa = table.mean_owa[deforma_idx][0];
    let text = report(&run, None).unwrap();
    let caveat_stated = text.contains("not") && text.contains("expected to reproduce");
    let elapsed = start.elapsed();
    let ok = rows == n_series
        && deforma_owa <= avg_owa
        && caveat_stated
        && elapsed.as_secs_f64() < 30.0 * 60.0;
    announce(
        7,
        "desk-scale Weekly run",
        ok,
        &format!(
            "{source} data, {rows} series, DeFORMA OWA {deforma_owa:.4} vs AVG {avg_owa:.4}, \
             elapsed {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_8_envelope_fuzz() {
    let mut rng = ChaCha8Rng::seed_from_u64(888);
    for _ in 0..10_000 {
        let k = rng.gen_range(2..6);
        let h = rng.gen_range(1..8);
        let forecasts: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..h).map(|_| rng.gen_range(-1e4..1e4)).collect())
            .collect();
        let mut raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-6..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.iter_mut().for_each(|w| *w /= total);
        let weights = WeightVector::new(raw).unwrap();
        let fused = fuse_forecast(&weights, &forecasts).unwrap();
        for t in 0..h {
            let lo = forecasts.iter().map(|f| f[t]).fold(f64::INFINITY, f64::min);
            let hi = forecasts.iter().map(|f| f[t]).fold(f64::NEG_INFINITY, f64::max);
            assert!(
                fused[t] >= lo - 1e-9 && fused[t] <= hi + 1e-9,
                "fused {} outside [{lo}, {hi}]",
                fused[t]
            );
        }
    }
    announce(8, "envelope property fuzz", true, "10000 random pairs inside the envelope");
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = weekly_desk_dataset(40, 99);
    let train = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    write_m4_dataset(&dataset, &train, &test).unwrap();
    let cfg = ExperimentConfig::from_str(&format!(
        "data.train_csv = {}\ndata.test_csv = {}\ndata.subset = W\n\
         pool.learners = SES=ses,Theta=theta,Naive2=naive2\n\
         cv.folds = 2\ncv.repeats = 1\ncv.seed = 5\n\
         arch.halvings = 5\narch.conv_filters = 8\narch.meta_features = 16\n\
         arch.max_length = 32\narch.dropout_rate = 0.1\n\
         train.learning_rate = 0.001\ntrain.batch_size = 16\ntrain.max_epochs = 4\n\
         train.patience = 10\ntrain.validation_fraction = 0.1\ntrain.seed = 5\n\
         methods = AVG,FFORMA-N,DeFORMA\nout_dir = {}\n",
        train.display(),
        test.display(),
        dir.path().join("run").display()
    ))
    .unwrap();
    let run = run_experiment(&cfg).unwrap();
    let paths = RunPaths::new(&run);
    let manifest = std::fs::read(paths.manifest()).unwrap();
    let mean = std::fs::read(paths.mean_scores()).unwrap();
    let median = std::fs::read(paths.median_scores()).unwrap();
    // Rerun from the same manifest.
    let run2 = run_experiment(&cfg).unwrap();
    let paths2 = RunPaths::new(&run2);
    let same_manifest = manifest == std::fs::read(paths2.manifest()).unwrap();
    let same_mean = mean == std::fs::read(paths2.mean_scores()).unwrap();
    let same_median = median == std::fs::read(paths2.median_scores()).unwrap();
    announce(
        9,
        "determinism",
        same_manifest && same_mean && same_median,
        "two runs from one manifest produced byte-identical score tables",
    );
}
