//! Parameters, affine sum constraints and the Adam optimizer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Affine constraint applied per filter (leading-axis slice) after
/// every optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    None,
    SumToZero,
    SumToOne,
}

impl Constraint {
    pub fn tag(self) -> &'static str {
        match self {
            Constraint::None => "none",
            Constraint::SumToZero => "sum-to-zero",
            Constraint::SumToOne => "sum-to-one",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "none" => Ok(Constraint::None),
            "sum-to-zero" => Ok(Constraint::SumToZero),
            "sum-to-one" => Ok(Constraint::SumToOne),
            other => Err(Error::Config(format!("unknown constraint tag '{other}'"))),
        }
    }
}

/// A trainable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub constraint: Constraint,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, constraint: Constraint) -> Self {
        let grad = Tensor::zeros(value.shape.clone());
        Parameter {
            name: name.into(),
            value,
            grad,
            constraint,
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grad.data {
            *g = 0.0;
        }
    }
}

/// Euclidean projection onto the parameter's affine constraint set,
/// applied per leading-axis filter: sum-to-zero subtracts the filter
/// mean, sum-to-one adds the uniform deficit share.
pub fn apply_constraints(param: &mut Parameter) {
    if param.constraint == Constraint::None {
        return;
    }
    let filters = param.value.shape[0].max(1);
    let width = param.value.len() / filters;
    for f in 0..filters {
        let slice = &mut param.value.data[f * width..(f + 1) * width];
        let sum: f64 = slice.iter().sum();
        match param.constraint {
            Constraint::SumToZero => {
                let mean = sum / width as f64;
                for w in slice {
                    *w -= mean;
                }
            }
            Constraint::SumToOne => {
                let correction = (1.0 - sum) / width as f64;
                for w in slice {
                    *w += correction;
                }
            }
            Constraint::None => unreachable!(),
        }
    }
}

/// He-style uniform init for conv/dense weights.
pub fn he_init(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape, data }
}

/// Adam with per-parameter moment slots. Constrained parameters are
/// re-projected after every step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: usize,
    slots: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(params: &[Parameter], learning_rate: f64) -> Self {
        let slots = params
            .iter()
            .map(|p| {
                (
                    Tensor::zeros(p.value.shape.clone()),
                    Tensor::zeros(p.value.shape.clone()),
                )
            })
            .collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            slots,
        }
    }

    /// One update from the gradients currently stored on the parameters.
    pub fn step(&mut self, params: &mut [Parameter]) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (param, (m, v)) in params.iter_mut().zip(&mut self.slots) {
            for i in 0..param.value.len() {
                let g = param.grad.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data[i] / bias1;
                let v_hat = v.data[i] / bias2;
                param.value.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            apply_constraints(param);
        }
    }
}
