//! Preference losses and their minority-aware variants.
//!
//! Every loss here is a function of the pair logit `l` (policy log-ratio
//! minus reference log-ratio). The weight `W` and margin `Gamma` enter as
//! plain numbers: callers compute them from the metric and pass them in, so
//! no gradient ever flows through them.

use crate::config::{Margin, Objective, Reweight};

/// Logistic function, evaluated without overflow for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z), stable for large |z|.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// -log sigmoid(z).
pub fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

pub fn dpo_loss(logit: f64, beta: f64) -> f64 {
    neg_log_sigmoid(beta * logit)
}

/// Plain IPO: squared distance of the logit from 1/(2 beta).
pub fn ipo_loss(logit: f64, beta: f64) -> f64 {
    let d = logit - 1.0 / (2.0 * beta);
    d * d
}

/// Per-pair weight W(u). Treated as a constant by every gradient.
pub fn reweight(u: f64, variant: Reweight, k1: f64) -> f64 {
    match variant {
        Reweight::Linear => 1.0 / (1.0 + k1 * u),
        Reweight::Quadratic => 1.0 / (1.0 + k1 * u * u),
        Reweight::Sqrt => 1.0 / (1.0 + k1 * u.sqrt()),
        // 1 / (1 + e^{k1 u}) == sigmoid(-k1 u), which does not overflow.
        Reweight::Sigmoid => sigmoid(-k1 * u),
        Reweight::None => 1.0,
    }
}

/// Per-pair margin Gamma(u). Treated as a constant by every gradient.
pub fn margin(u: f64, variant: Margin, k2: f64, c2: f64) -> f64 {
    match variant {
        Margin::Quadratic => k2 * u * u + c2,
        Margin::Linear => k2 * u + c2,
        Margin::None => 0.0,
    }
}

/// Inputs of one adaptive loss term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub logit: f64,
    pub weight: f64,
    pub margin: f64,
    pub beta: f64,
}

impl LossTerms {
    /// Terms that reduce the adaptive losses to their plain forms.
    pub fn plain(logit: f64, beta: f64) -> Self {
        Self {
            logit,
            weight: 1.0,
            margin: 0.0,
            beta,
        }
    }
}

/// -W log sigmoid(beta l - Gamma).
pub fn adaptive_dpo_loss(t: LossTerms) -> f64 {
    t.weight * neg_log_sigmoid(t.beta * t.logit - t.margin)
}

/// W (l - Gamma - 1/(2 beta))^2.
pub fn adaptive_ipo_loss(t: LossTerms) -> f64 {
    let d = t.logit - t.margin - 1.0 / (2.0 * t.beta);
    t.weight * d * d
}

/// beta W sigmoid(-beta l + Gamma): the scalar that multiplies the logit
/// gradient. The loss gradient is `-factor * grad(l)`.
pub fn adaptive_grad_factor(t: LossTerms) -> f64 {
    t.beta * t.weight * sigmoid(-t.beta * t.logit + t.margin)
}

/// Loss value and its derivative with respect to the logit, holding W and
/// Gamma fixed.
pub fn loss_and_dlogit(objective: Objective, t: LossTerms) -> (f64, f64) {
    match objective {
        Objective::Dpo => (adaptive_dpo_loss(t), -adaptive_grad_factor(t)),
        Objective::Ipo => {
            let d = t.logit - t.margin - 1.0 / (2.0 * t.beta);
            (t.weight * d * d, 2.0 * t.weight * d)
        }
    }
}
