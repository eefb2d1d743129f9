//! Central finite-difference gradient checking against a scalar loss
//! closure.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::optim::Parameter;

/// Compares analytic gradients (already stored on `params`) against
/// central finite differences of `loss_fn`, over up to
/// `samples_per_param` randomly chosen entries of each parameter.
/// Returns the maximum relative error.
pub fn max_relative_error(
    params: &mut [Parameter],
    loss_fn: impl Fn(&[Parameter]) -> f64,
    samples_per_param: usize,
    step: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let mut worst = 0.0f64;
    for p in 0..params.len() {
        let len = params[p].value.len();
        let entries: Vec<usize> = if len <= samples_per_param {
            (0..len).collect()
        } else {
            (0..samples_per_param).map(|_| rng.gen_range(0..len)).collect()
        };
        for i in entries {
            let original = params[p].value.data[i];
            params[p].value.data[i] = original + step;
            let plus = loss_fn(params);
            params[p].value.data[i] = original - step;
            let minus = loss_fn(params);
            params[p].value.data[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = params[p].grad.data[i];
            let scale = analytic.abs().max(numeric.abs()).max(1.0);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}
