//! Dense linear algebra, parameters, optimizers, randomness and the
//! Gumbel-softmax primitive that the rest of the crate builds on.

mod gradcheck;
mod gumbel;
mod matrix;
mod optim;
mod rng;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradFailure};
pub use gumbel::{
    argmax, gumbel_noise, gumbel_softmax, gumbel_softmax_hard, softmax_backward, HardSample,
    Relaxation, SampleMode, GUMBEL_EPS,
};
pub use matrix::{axpy, dot, matmul, squared_distance, Matrix};
pub use optim::{HasParameters, Optimizer, OptimizerKind, Parameter};
pub use rng::Rng;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log Σ exp(x_i)`, stable for large magnitudes.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax probabilities of `logits` (temperature 1).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}
