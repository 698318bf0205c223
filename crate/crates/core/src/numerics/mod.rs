//! Dense linear algebra, seeded randomness, Adam and gradient checking.

mod gradcheck;
mod matrix;
mod params;
mod rng;

pub use gradcheck::{
    evaluate_with_gradients, finite_difference_check, relative_error, GradCheckEntry,
    GradCheckReport, Objective, RELATIVE_ERROR_FLOOR,
};
pub use matrix::{affine_tanh_forward, axpy, dot, xavier_bound, Activation, Matrix};
pub use params::{AdamConfig, NamedTensors, ParameterBlock, Parameters};
pub use rng::Rng;

/// `ln Σ exp(v_i)` with max-shift stabilization.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|v| (v - lse).exp()).collect()
}
