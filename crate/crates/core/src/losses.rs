//! Training objectives: cross-entropy for the identity and attribute heads,
//! the attribute-based label smoothing (ALS) loss on the verification output,
//! and the weighted total.
//!
//! All losses here take probability vectors (softmax outputs). The
//! `*_from_logits` variants also return the gradient with respect to the
//! logits, which is what the training loop back-propagates.

use crate::error::{Error, Result};

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Attribute labels of one image: `(color, type)`.
pub type Attributes = (u32, u32);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsParams {
    /// Weight on the extra term for same-attribute, different-identity pairs;
    /// same-identity pairs get `1 - theta`.
    pub theta: f64,
    /// Shift inside `log(alpha + q)`.
    pub alpha: f64,
    /// Multiplier of the smoothing term.
    pub beta: f64,
}

impl Default for AlsParams {
    fn default() -> Self {
        Self {
            theta: 0.1,
            alpha: 0.1,
            beta: 1.0,
        }
    }
}

impl AlsParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("als.theta must be in [0, 1], got {}", self.theta)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("als.alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("als.beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("loss.lambda1", self.lambda1), ("loss.lambda2", self.lambda2), ("loss.lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Labels of the two images in a verification pair. Attributes are `None`
/// when either label is missing; such pairs never count as attribute-equal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairContext {
    pub id1: u32,
    pub id2: u32,
    pub attr1: Option<Attributes>,
    pub attr2: Option<Attributes>,
}

impl PairContext {
    pub fn same_identity(&self) -> bool {
        self.id1 == self.id2
    }

    pub fn same_attributes(&self) -> bool {
        matches!((self.attr1, self.attr2), (Some(a), Some(b)) if a == b)
    }
}

/// Smoothing weight ε of a pair:
/// `1 - θ` for the same identity, `θ` for different identities sharing both
/// colour and type, `0` otherwise.
pub fn epsilon_weight(ctx: &PairContext, theta: f64) -> f64 {
    if ctx.same_identity() {
        1.0 - theta
    } else if ctx.same_attributes() {
        theta
    } else {
        0.0
    }
}

fn check_distribution(probabilities: &[f64], target: usize) -> Result<()> {
    if target >= probabilities.len() {
        return Err(Error::Index {
            index: target,
            len: probabilities.len(),
        });
    }
    if !probabilities.iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite("probabilities".into()));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(Error::Config(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

/// `-log q_target`, with `q` floored at [`LOG_FLOOR`].
pub fn cross_entropy(probabilities: &[f64], target: usize) -> Result<f64> {
    check_distribution(probabilities, target)?;
    Ok(-probabilities[target].max(LOG_FLOOR).ln())
}

/// `CE(q, t) + β · ε · (-log(α + q_t))`.
pub fn als_loss(probabilities: &[f64], target: usize, ctx: &PairContext, params: &AlsParams) -> Result<f64> {
    let ce = cross_entropy(probabilities, target)?;
    let eps = epsilon_weight(ctx, params.theta);
    let shifted = (params.alpha + probabilities[target]).max(LOG_FLOOR);
    Ok(ce + params.beta * eps * -shifted.ln())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy on softmax(logits) and its gradient with respect to the logits.
pub fn cross_entropy_from_logits(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let q = softmax(logits);
    let loss = cross_entropy(&q, target)?;
    let mut grad = q.clone();
    if q[target] > LOG_FLOOR {
        grad[target] -= 1.0;
    } else {
        // Clamped: the floor is constant, so only the normalization remains.
        grad.iter_mut().for_each(|g| *g = 0.0);
    }
    Ok((loss, grad))
}

/// ALS loss on softmax(logits) and its gradient with respect to the logits.
pub fn als_loss_from_logits(logits: &[f64], target: usize, ctx: &PairContext, params: &AlsParams) -> Result<(f64, Vec<f64>)> {
    let q = softmax(logits);
    let loss = als_loss(&q, target, ctx, params)?;
    let qt = q[target];
    // dL/dq_t; the softmax Jacobian maps it to dL/dz_j = dL/dq_t · q_t (δ_jt - q_j).
    let mut d_qt = 0.0;
    if qt > LOG_FLOOR {
        d_qt -= 1.0 / qt;
    }
    let eps = epsilon_weight(ctx, params.theta);
    let shifted = params.alpha + qt;
    if shifted > LOG_FLOOR {
        d_qt -= params.beta * eps / shifted;
    }
    let grad = q
        .iter()
        .enumerate()
        .map(|(j, &qj)| {
            let delta = if j == target { 1.0 } else { 0.0 };
            d_qt * qt * (delta - qj)
        })
        .collect();
    Ok((loss, grad))
}

/// Per-component losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub category: f64,
    pub color: f64,
    pub type_: f64,
    pub verify: f64,
}

/// `λ1·category + λ2·(color + type) + λ3·verify`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("category", c.category), ("color", c.color), ("type", c.type_), ("verify", c.verify)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component `{name}` = {v}")));
        }
    }
    Ok(w.lambda1 * c.category + w.lambda2 * (c.color + c.type_) + w.lambda3 * c.verify)
}
