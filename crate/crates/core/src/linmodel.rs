//! Logistic regression over the flattened `24·D + U` feature vector.
//!
//! Every (feature, cycle day) pair owns one coefficient, so day-resolved
//! trends are read straight off the weight vector.

use serde::{Deserialize, Serialize};

use crate::codec::schema::WINDOW_DAYS;
use crate::codec::{FeatureId, FeatureSchema, SparseVec};
use crate::error::{Error, Result};
use crate::neural::sigmoid;

/// Logits are clamped to this magnitude before exponentiation.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_strength: f64,
}

impl LinearParams {
    pub fn zeros(width: usize, l2_strength: f64) -> Self {
        LinearParams { weights: vec![0.0; width], bias: 0.0, l2_strength }
    }

    pub fn width(&self) -> usize {
        self.weights.len()
    }

    /// Weights followed by the bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.push(self.bias);
        v
    }

    pub fn from_flat(flat: &[f64], l2_strength: f64) -> Result<Self> {
        let (bias, weights) = flat.split_last().ok_or(Error::Shape {
            expected: 1,
            actual: 0,
            context: "linear parameters",
        })?;
        let p = LinearParams { weights: weights.to_vec(), bias: *bias, l2_strength };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Domain("non-finite linear parameter".into()));
        }
        if !(self.l2_strength >= 0.0) {
            return Err(Error::Domain(format!("l2_strength {} is negative", self.l2_strength)));
        }
        Ok(())
    }
}

fn check_width(params: &LinearParams, actual: usize) -> Result<()> {
    if actual != params.width() {
        return Err(Error::Shape { expected: params.width(), actual, context: "linear input" });
    }
    Ok(())
}

pub fn lr_logit(params: &LinearParams, x: &[f64]) -> Result<f64> {
    check_width(params, x.len())?;
    Ok(params.bias + crate::neural::dot(&params.weights, x))
}

pub fn lr_logit_sparse(params: &LinearParams, x: &SparseVec) -> Result<f64> {
    let mut z = params.bias;
    for (i, v) in x.iter() {
        let w = params.weights.get(i).ok_or(Error::Shape {
            expected: params.width(),
            actual: i + 1,
            context: "sparse linear input",
        })?;
        z += w * v;
    }
    Ok(z)
}

pub fn lr_predict(params: &LinearParams, x: &[f64]) -> Result<f64> {
    lr_logit(params, x).map(|z| sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
}

pub fn lr_predict_sparse(params: &LinearParams, x: &SparseVec) -> Result<f64> {
    lr_logit_sparse(params, x).map(|z| sigmoid(z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)))
}

/// `log(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Cross-entropy of a logit against a 0/1 label, `softplus(z) − y·z`.
#[inline]
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

/// Mean cross-entropy plus `(λ/2)·‖w‖²` and its exact gradient.
///
/// The gradient is laid out as [`LinearParams::to_flat`]. The bias is not
/// regularized.
pub fn lr_loss_grad(params: &LinearParams, batch: &[(SparseVec, f64)]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; params.width() + 1];
    let mut loss = 0.0;
    for (x, y) in batch {
        let z = lr_logit_sparse(params, x)?;
        loss += bce_with_logit(z, *y);
        let dz = (sigmoid(z) - y) / n;
        for (i, v) in x.iter() {
            grad[i] += dz * v;
        }
        grad[params.width()] += dz;
    }
    loss /= n;
    let lam = params.l2_strength;
    if lam > 0.0 {
        loss += 0.5 * lam * params.weights.iter().map(|w| w * w).sum::<f64>();
        for (g, w) in grad.iter_mut().zip(&params.weights) {
            *g += lam * w;
        }
    }
    Ok((loss, grad))
}

/// The 24 coefficients of a binary daily feature, in cycle-day order (log-odds units).
pub fn lr_coefficient_trend(params: &LinearParams, schema: &FeatureSchema, feature: FeatureId) -> Result<[f64; WINDOW_DAYS]> {
    let slot = schema
        .binary_slot(feature)
        .ok_or_else(|| Error::NotBinaryFeature(feature.name().to_string()))?;
    check_width(params, schema.flat_width())?;
    let d = schema.day_width();
    Ok(std::array::from_fn(|day| params.weights[day * d + slot]))
}
