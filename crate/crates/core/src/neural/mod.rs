//! Numerical building blocks shared by the recurrent predictors.
//!
//! Parameters live in one flat `Vec<f64>` per model; layers are views into
//! it at fixed offsets so optimizers, checkpoints and the gradient checker can
//! treat every model the same way.

pub mod gradcheck;
pub mod lstm;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use lstm::{LstmStack, LstmTape, StepInput};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn dsigmoid_from_output(s: f64) -> f64 {
    s * (1.0 - s)
}

#[inline]
pub fn dtanh_from_output(t: f64) -> f64 {
    1.0 - t * t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout scale factors: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Applies inverted dropout in training mode; identity in eval mode or at rate 0.
pub fn dropout(v: &[f64], rate: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if mode == Mode::Eval || rate == 0.0 {
        return v.to_vec();
    }
    dropout_mask(v.len(), rate, rng)
        .into_iter()
        .zip(v)
        .map(|(m, x)| m * x)
        .collect()
}

/// Fills `out` with uniform(−s, s) draws, `s = 1/√fan_in`.
pub fn init_uniform(out: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng) {
    let s = 1.0 / (fan_in.max(1) as f64).sqrt();
    for w in out {
        *w = rng.random_range(-s..s);
    }
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
