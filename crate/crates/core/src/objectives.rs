//! Training objectives and their analytic gradients.
//!
//! * pairwise hinge: `max(0, τ - s⁺ + s⁻)`
//! * margin contrastive: `-log(e^{s⁺} / (e^{s⁺} + Σ_j e^{s⁻_j - τ}))`
//! * momentum similarity: the same softmax form over cosine similarities,
//!   where `c⁺ = cos(z⁺, z⁺_m)` and `c⁻_j = cos(z⁺_m, q_j)`
//! * combination: `λ·L_con + (1-λ)·L_mom`
//!
//! Softmax forms are evaluated with log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub tau: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig { tau: DEFAULT_MARGIN }
    }
}

impl MarginConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::InvalidArgument(format!("margin must be finite and >= 0, got {tau}")));
        }
        Ok(MarginConfig { tau })
    }
}

fn finite(x: f64, what: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn pairwise_loss(s_pos: f64, s_neg: f64, tau: f64) -> Result<f64> {
    finite(s_pos, "positive score")?;
    finite(s_neg, "negative score")?;
    Ok((tau - s_pos + s_neg).max(0.0))
}

/// `(dL/ds⁺, dL/ds⁻)`; the subgradient at the kink is zero.
pub fn pairwise_grad(s_pos: f64, s_neg: f64, tau: f64) -> (f64, f64) {
    if tau - s_pos + s_neg > 0.0 {
        (-1.0, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// `-log softmax(logits)[0]` and its gradient with respect to the logits.
fn neg_log_softmax_first(logits: &[f64]) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[0] -= 1.0;
    (lse - logits[0], grad)
}

fn contrastive_logits(s_pos: f64, s_negs: &[f64], tau: f64) -> Result<Vec<f64>> {
    if s_negs.is_empty() {
        return Err(Error::InvalidArgument("contrastive loss needs at least one negative".into()));
    }
    finite(s_pos, "positive score")?;
    let mut logits = Vec::with_capacity(s_negs.len() + 1);
    logits.push(s_pos);
    for &s in s_negs {
        logits.push(finite(s, "negative score")? - tau);
    }
    Ok(logits)
}

pub fn contrastive_loss(s_pos: f64, s_negs: &[f64], tau: f64) -> Result<f64> {
    Ok(neg_log_softmax_first(&contrastive_logits(s_pos, s_negs, tau)?).0)
}

/// Loss with `dL/ds⁺` and `dL/ds⁻_j`.
pub fn contrastive_loss_grad(s_pos: f64, s_negs: &[f64], tau: f64) -> Result<(f64, f64, Vec<f64>)> {
    let (loss, mut g) = neg_log_softmax_first(&contrastive_logits(s_pos, s_negs, tau)?);
    let g_pos = g.remove(0);
    Ok((loss, g_pos, g))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidArgument("cosine of a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `d cos(a, b) / d a`.
pub fn cosine_grad_a(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let c = cosine(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - c * x / (na * na))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumSimilarities {
    pub c_pos: f64,
    pub c_negs: Vec<f64>,
}

pub fn momentum_similarities(
    z_pos: &[f64],
    z_pos_m: &[f64],
    queue: &[Vec<f64>],
) -> Result<MomentumSimilarities> {
    if queue.is_empty() {
        return Err(Error::InvalidArgument(
            "momentum loss over an empty queue".into(),
        ));
    }
    let c_pos = cosine(z_pos, z_pos_m)?;
    let c_negs = queue
        .iter()
        .map(|q| cosine(z_pos_m, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentumSimilarities { c_pos, c_negs })
}

pub fn momentum_loss(z_pos: &[f64], z_pos_m: &[f64], queue: &[Vec<f64>], tau: f64) -> Result<f64> {
    let sims = momentum_similarities(z_pos, z_pos_m, queue)?;
    contrastive_loss(sims.c_pos, &sims.c_negs, tau)
}

/// Momentum loss and its gradients. The momentum positive and the queue are
/// detached, so their gradients are identically zero and only `z⁺` (through
/// `c⁺`) receives gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumLossGrad {
    pub loss: f64,
    pub z_pos: Vec<f64>,
    pub z_pos_m: Vec<f64>,
    pub queue: Vec<Vec<f64>>,
}

pub fn momentum_loss_grad(
    z_pos: &[f64],
    z_pos_m: &[f64],
    queue: &[Vec<f64>],
    tau: f64,
) -> Result<MomentumLossGrad> {
    let sims = momentum_similarities(z_pos, z_pos_m, queue)?;
    let (loss, d_cpos, _) = contrastive_loss_grad(sims.c_pos, &sims.c_negs, tau)?;
    let grad = cosine_grad_a(z_pos, z_pos_m)?
        .into_iter()
        .map(|g| g * d_cpos)
        .collect();
    Ok(MomentumLossGrad {
        loss,
        z_pos: grad,
        z_pos_m: vec![0.0; z_pos_m.len()],
        queue: queue.iter().map(|q| vec![0.0; q.len()]).collect(),
    })
}

pub fn combined_loss(l_contrastive: f64, l_momentum: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("λ must be in [0, 1], got {lambda}")));
    }
    Ok(lambda * l_contrastive + (1.0 - lambda) * l_momentum)
}
