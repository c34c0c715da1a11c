//! Minority-instance-aware metric.
//!
//! A pair is scored by the spread and the sign of its logit across an
//! ensemble made of the current model and its recent EMA snapshots:
//!
//! * confidence `c = 1 - mean_m sigmoid(rho * l_m)`: close to 1 when the
//!   ensemble persistently disagrees with the given label;
//! * stability `s = sum_m (l_m - mean)^2 / (M - 1)`: large when the
//!   ensemble members disagree with each other;
//! * score `u = s * c`.
//!
//! Larger `u` marks a pair as more likely minority-labeled.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::config::{C2Policy, LossConfig};
use crate::error::{Error, Result};
use crate::mlp::Mlp;
use crate::objective::{margin, reweight, sigmoid};
use crate::policy::PairModel;
use crate::trainer::ema_update;
use crate::types::PreferencePair;

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: u64,
    pub params: Mlp,
}

/// The trained parameters, their running EMA, and up to M-1 EMA snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    current: Mlp,
    ema: Mlp,
    snapshots: VecDeque<Snapshot>,
    size: usize,
}

impl EnsembleState {
    pub fn new(initial: Mlp, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidConfig { field: "M" });
        }
        Ok(Self {
            ema: initial.clone(),
            current: initial,
            snapshots: VecDeque::new(),
            size,
        })
    }

    /// Builds a state from explicit checkpoints, oldest snapshot first.
    pub fn from_parts(
        current: Mlp,
        ema: Mlp,
        snapshots: Vec<Snapshot>,
        size: usize,
    ) -> Result<Self> {
        let mut state = Self::new(current, size)?;
        state.current.ensure_same_shape(&ema)?;
        state.ema = ema;
        for s in snapshots {
            state.push(s)?;
        }
        Ok(state)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn current(&self) -> &Mlp {
        &self.current
    }

    pub fn current_mut(&mut self) -> &mut Mlp {
        &mut self.current
    }

    pub fn ema(&self) -> &Mlp {
        &self.ema
    }

    pub fn snapshots(&self) -> impl Iterator<Item = &Snapshot> {
        self.snapshots.iter()
    }

    pub fn snapshots_mut(&mut self) -> impl Iterator<Item = &mut Snapshot> {
        self.snapshots.iter_mut()
    }

    /// Exactly M members: the current model, then snapshots newest first,
    /// padded with the current model until M is reached.
    pub fn members(&self) -> Vec<&Mlp> {
        let mut out = Vec::with_capacity(self.size);
        out.push(&self.current);
        out.extend(self.snapshots.iter().rev().map(|s| &s.params));
        while out.len() < self.size {
            out.push(&self.current);
        }
        out
    }

    pub fn update_ema(&mut self, decay: f64) -> Result<()> {
        self.ema = ema_update(&self.ema, &self.current, decay)?;
        Ok(())
    }

    /// Records the current EMA as a snapshot, evicting the oldest beyond M-1.
    pub fn snapshot_ema(&mut self, step: u64) -> Result<()> {
        let s = Snapshot {
            step,
            params: self.ema.clone(),
        };
        self.push(s)
    }

    fn push(&mut self, s: Snapshot) -> Result<()> {
        self.current.ensure_same_shape(&s.params)?;
        if self
            .snapshots
            .back()
            .is_some_and(|last| last.step >= s.step)
        {
            return Err(Error::InvalidConfig {
                field: "snapshot step",
            });
        }
        self.snapshots.push_back(s);
        while self.snapshots.len() > self.size - 1 {
            self.snapshots.pop_front();
        }
        Ok(())
    }
}

/// The pair logit of every ensemble member against the shared reference,
/// all evaluated with the same draw.
pub fn ensemble_logits<B: PairModel>(
    model: &B,
    ensemble: &EnsembleState,
    reference: &Mlp,
    pair: &PreferencePair,
    draw: &B::Draw,
) -> Result<Vec<f64>> {
    ensemble
        .members()
        .into_iter()
        .map(|m| model.logit(m, reference, pair, draw))
        .collect()
}

pub fn confidence(logits: &[f64], rho: f64) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mean: f64 = logits.iter().map(|&l| sigmoid(l * rho)).sum::<f64>() / logits.len() as f64;
    Ok(1.0 - mean)
}

pub fn stability(logits: &[f64]) -> Result<f64> {
    let m = logits.len();
    if m < 2 {
        return Err(Error::InsufficientCheckpoints(m));
    }
    // Shifting by the first member keeps identical logits at exactly zero.
    let d: Vec<f64> = logits.iter().map(|l| l - logits[0]).collect();
    let mean = d.iter().sum::<f64>() / m as f64;
    Ok(d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64)
}

pub fn minority_score(confidence: f64, stability: f64) -> f64 {
    stability * confidence
}

/// The additive margin offset c2 for one batch. Under `BatchMeanLogits` it is
/// beta times the mean current-model logit, used as a constant.
pub fn batch_c2(batch_logits: &[f64], beta: f64, policy: C2Policy) -> Result<f64> {
    match policy {
        C2Policy::Fixed(v) => Ok(v),
        C2Policy::BatchMeanLogits => {
            if batch_logits.is_empty() {
                return Err(Error::EmptyBatch);
            }
            Ok(beta * batch_logits.iter().sum::<f64>() / batch_logits.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricOutputs {
    /// Member logits; entry 0 belongs to the current model.
    pub logits: Vec<f64>,
    pub confidence: f64,
    pub stability: f64,
    pub score: f64,
    pub weight: f64,
    pub margin: f64,
}

impl MetricOutputs {
    pub fn current_logit(&self) -> f64 {
        self.logits[0]
    }
}

/// Confidence, stability and score of one logit vector, plus the weight and
/// margin they induce. With `adaptive == false` the weight is 1 and the
/// margin 0, matching the plain objectives.
pub fn metric_outputs(
    logits: Vec<f64>,
    cfg: &LossConfig,
    c2: f64,
    adaptive: bool,
) -> Result<MetricOutputs> {
    let c = confidence(&logits, cfg.rho)?;
    let s = stability(&logits)?;
    let u = minority_score(c, s);
    let (weight, gamma) = if adaptive {
        (
            reweight(u, cfg.reweight, cfg.k1),
            margin(u, cfg.margin, cfg.k2, c2),
        )
    } else {
        (1.0, 0.0)
    };
    Ok(MetricOutputs {
        logits,
        confidence: c,
        stability: s,
        score: u,
        weight,
        margin: gamma,
    })
}

/// One line of the per-pair metric dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetricRecord {
    pub pair_id: u64,
    pub step: u64,
    pub logits: Vec<f64>,
    pub c: f64,
    pub s: f64,
    pub u: f64,
    #[serde(rename = "W")]
    pub w: f64,
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flipped: Option<bool>,
}

impl PairMetricRecord {
    pub fn new(pair: &PreferencePair, step: u64, m: &MetricOutputs) -> Self {
        Self {
            pair_id: pair.pair_id,
            step,
            logits: m.logits.clone(),
            c: m.confidence,
            s: m.stability,
            u: m.score,
            w: m.weight,
            gamma: m.margin,
            flipped: pair.flipped,
        }
    }
}
