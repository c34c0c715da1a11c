//! The adaptive training loop.
//!
//! Each step runs in two phases. The metric phase evaluates every batch pair
//! on the pre-step ensemble and freezes its weight and margin. The gradient
//! phase then differentiates the loss in the current parameters only, reading
//! the frozen weight and margin as constants.

use rand::seq::SliceRandom;

use crate::config::{Optimizer, TrainConfig};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::eval::pairwise_accuracy;
use crate::metric::{
    batch_c2, ensemble_logits, metric_outputs, EnsembleState, MetricOutputs, PairMetricRecord,
};
use crate::mlp::Mlp;
use crate::objective::{loss_and_dlogit, LossTerms};
use crate::policy::PairModel;
use crate::rng::{self, rng_for};
use crate::types::{PreferencePair, RunRecord};

/// `decay * ema + (1 - decay) * theta`, elementwise.
pub fn ema_update(ema: &Mlp, theta: &Mlp, decay: f64) -> Result<Mlp> {
    ema.ensure_same_shape(theta)?;
    let mut out = ema.clone();
    for (e, &t) in out.params_mut().iter_mut().zip(theta.params()) {
        *e = decay * *e + (1.0 - decay) * t;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    },
}

impl OptimizerState {
    pub fn new(kind: Optimizer, n_params: usize) -> Self {
        match kind {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam { beta1, beta2, eps } => OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
        }
    }

    /// One descent step along `-grad`.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            OptimizerState::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + *eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub reference: Mlp,
    pub ensemble: EnsembleState,
    pub optimizer: OptimizerState,
    pub step: u64,
}

impl TrainState {
    /// Reference and EMA both start as copies of `initial`.
    pub fn new(initial: Mlp, cfg: &TrainConfig) -> Result<Self> {
        let n = initial.params().len();
        Ok(Self {
            reference: initial.clone(),
            ensemble: EnsembleState::new(initial, cfg.loss.ensemble_size)?,
            optimizer: OptimizerState::new(cfg.optimizer, n),
            step: 0,
        })
    }

    pub fn theta(&self) -> &Mlp {
        self.ensemble.current()
    }
}

/// Randomness for a step, one draw per pair, shared by both phases.
pub fn batch_draws<B: PairModel>(
    model: &B,
    seed: u64,
    step: u64,
    batch: &[&PreferencePair],
) -> Vec<B::Draw> {
    batch.iter().map(|p| model.draw(seed, &[step], p)).collect()
}

/// Metric phase: ensemble logits, confidence, stability, score, and the
/// frozen weight and margin for every pair of the batch.
pub fn evaluate_batch<B: PairModel>(
    model: &B,
    ensemble: &EnsembleState,
    reference: &Mlp,
    batch: &[&PreferencePair],
    draws: &[B::Draw],
    cfg: &TrainConfig,
) -> Result<Vec<MetricOutputs>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let logits: Vec<Vec<f64>> = batch
        .iter()
        .zip(draws)
        .map(|(p, d)| ensemble_logits(model, ensemble, reference, p, d))
        .collect::<Result<_>>()?;
    let current: Vec<f64> = logits.iter().map(|l| l[0]).collect();
    let c2 = batch_c2(&current, cfg.loss.beta, cfg.loss.c2_policy)?;
    logits
        .into_iter()
        .map(|l| metric_outputs(l, &cfg.loss, c2, cfg.adaptive))
        .collect()
}

/// Gradient phase: mean batch loss and its gradient in `theta`, with each
/// pair's weight and margin taken from `frozen` as constants.
pub fn loss_and_gradient<B: PairModel>(
    model: &B,
    theta: &Mlp,
    reference: &Mlp,
    batch: &[&PreferencePair],
    draws: &[B::Draw],
    frozen: &[MetricOutputs],
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.params().len()];
    for ((pair, draw), m) in batch.iter().zip(draws).zip(frozen) {
        let (logit, g) = model.logit_grad(theta, reference, pair, draw)?;
        let terms = LossTerms {
            logit,
            weight: m.weight,
            margin: m.margin,
            beta: cfg.loss.beta,
        };
        let (l, dl) = loss_and_dlogit(cfg.loss.objective, terms);
        loss += l;
        for (acc, gi) in grad.iter_mut().zip(&g) {
            *acc += dl * gi;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Mean loss of a batch recomputed from metric outputs alone.
pub fn batch_loss_from_metrics(metrics: &[MetricOutputs], cfg: &TrainConfig) -> f64 {
    let sum: f64 = metrics
        .iter()
        .map(|m| {
            let t = LossTerms {
                logit: m.current_logit(),
                weight: m.weight,
                margin: m.margin,
                beta: cfg.loss.beta,
            };
            loss_and_dlogit(cfg.loss.objective, t).0
        })
        .sum();
    sum / metrics.len() as f64
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Batch pairs in ascending `pair_id` order with their metric outputs.
    pub metrics: Vec<(u64, MetricOutputs)>,
    pub loss: f64,
    pub gradient: Vec<f64>,
}

/// One optimizer step over `batch`, followed by the EMA update and, every
/// `snapshot_interval` steps, an EMA snapshot.
pub fn train_step<B: PairModel>(
    model: &B,
    state: &mut TrainState,
    batch: &[&PreferencePair],
    cfg: &TrainConfig,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut batch = batch.to_vec();
    batch.sort_by_key(|p| p.pair_id);
    let draws = batch_draws(model, cfg.seed, state.step, &batch);
    let metrics = evaluate_batch(
        model,
        &state.ensemble,
        &state.reference,
        &batch,
        &draws,
        cfg,
    )?;
    let (loss, gradient) = loss_and_gradient(
        model,
        state.theta(),
        &state.reference,
        &batch,
        &draws,
        &metrics,
        cfg,
    )?;

    state.optimizer.apply(
        state.ensemble.current_mut().params_mut(),
        &gradient,
        cfg.learning_rate,
    );
    state.ensemble.update_ema(cfg.loss.ema_decay)?;
    state.step += 1;
    if state.step.is_multiple_of(cfg.loss.snapshot_interval) {
        state.ensemble.snapshot_ema(state.step)?;
    }

    let metrics = batch.iter().map(|p| p.pair_id).zip(metrics).collect();
    Ok(StepOutput {
        metrics,
        loss,
        gradient,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: TrainState,
    pub records: Vec<RunRecord>,
    /// Every pair of every step, as seen by the metric phase.
    pub metric_dump: Vec<PairMetricRecord>,
}

/// Pairs in ascending `pair_id` order: the input order never matters.
fn canonical(ds: &Dataset) -> Vec<&PreferencePair> {
    let mut v: Vec<&PreferencePair> = ds.pairs.iter().collect();
    v.sort_by_key(|p| p.pair_id);
    v
}

pub fn check_dims(train: &Dataset, heldout: &Dataset) -> Result<()> {
    if (train.meta.context_dim, train.meta.item_dim)
        != (heldout.meta.context_dim, heldout.meta.item_dim)
    {
        return Err(Error::InvalidDims(format!(
            "train dims ({}, {}) differ from held-out dims ({}, {})",
            train.meta.context_dim,
            train.meta.item_dim,
            heldout.meta.context_dim,
            heldout.meta.item_dim
        )));
    }
    Ok(())
}

/// Full run: per-epoch seeded shuffles, a record every `eval_every` steps
/// and after the last step.
pub fn train_run<B: PairModel>(
    model: &B,
    cfg: &TrainConfig,
    train: &Dataset,
    heldout: &Dataset,
) -> Result<RunOutput> {
    cfg.validate()?;
    check_dims(train, heldout)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let init = model.init_network(
        train.meta.context_dim,
        train.meta.item_dim,
        &cfg.hidden,
        cfg.seed,
    );
    let mut state = TrainState::new(init, cfg)?;
    let pairs = canonical(train);
    let by_id: std::collections::HashMap<u64, &PreferencePair> =
        pairs.iter().map(|p| (p.pair_id, *p)).collect();

    let steps_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total = (steps_per_epoch * cfg.epochs) as u64;
    let mut records = Vec::new();
    let mut metric_dump = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order = pairs.clone();
        order.shuffle(&mut rng_for(cfg.seed, &[rng::SHUFFLE, epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let step_before = state.step;
            let out = train_step(model, &mut state, batch, cfg)?;
            for (id, m) in &out.metrics {
                metric_dump.push(PairMetricRecord::new(by_id[id], step_before, m));
            }
            if state.step % cfg.eval_every == 0 || state.step == total {
                let k = out.metrics.len() as f64;
                let mean = |f: fn(&MetricOutputs) -> f64| {
                    out.metrics.iter().map(|(_, m)| f(m)).sum::<f64>() / k
                };
                records.push(RunRecord {
                    step: state.step,
                    mean_loss: out.loss,
                    mean_u: mean(|m| m.score),
                    mean_w: mean(|m| m.weight),
                    mean_margin: mean(|m| m.margin),
                    heldout_accuracy: Some(pairwise_accuracy(
                        model,
                        state.theta(),
                        &state.reference,
                        heldout,
                        cfg.seed,
                    )?),
                });
            }
        }
    }
    Ok(RunOutput {
        state,
        records,
        metric_dump,
    })
}

/// Scores every pair of `ds` with the final ensemble.
pub fn final_metrics<B: PairModel>(
    model: &B,
    state: &TrainState,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<PairMetricRecord>> {
    let pairs = canonical(ds);
    let draws: Vec<B::Draw> = pairs
        .iter()
        .map(|p| model.draw(cfg.seed, &[rng::EVAL_DRAW, state.step], p))
        .collect();
    let metrics = evaluate_batch(
        model,
        &state.ensemble,
        &state.reference,
        &pairs,
        &draws,
        cfg,
    )?;
    Ok(pairs
        .iter()
        .zip(&metrics)
        .map(|(p, m)| PairMetricRecord::new(p, state.step, m))
        .collect())
}
