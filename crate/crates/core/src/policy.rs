//! The trained scorer and the backend abstraction shared with the diffusion
//! toy.
//!
//! The policy is represented by a scalar score `f(c, x)` standing for
//! `log pi(x | c)` up to a per-context normalizer. Every objective only sees
//! the difference of winner and loser scores under one context, in which the
//! normalizer cancels, so it is never computed.

use crate::error::{Error, Result};
use crate::mlp::{Activation, Architecture, Mlp};
use crate::rng::{self, rng_for};
use crate::types::PreferencePair;

/// Anything that assigns a score to an item under a context.
pub trait ScoreFn {
    fn score(&self, context: &[f64], item: &[f64]) -> Result<f64>;
    fn same_shape(&self, other: &Self) -> Result<()>;
}

fn joined(context: &[f64], item: &[f64]) -> Vec<f64> {
    context.iter().chain(item).copied().collect()
}

impl ScoreFn for Mlp {
    fn score(&self, context: &[f64], item: &[f64]) -> Result<f64> {
        Ok(self.forward(&joined(context, item))?[0])
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        self.ensure_same_shape(other)
    }
}

/// l = [f_theta(c, x_w) - f_theta(c, x_l)] - [f_ref(c, x_w) - f_ref(c, x_l)].
pub fn pair_log_ratio<S: ScoreFn>(theta: &S, reference: &S, pair: &PreferencePair) -> Result<f64> {
    theta.same_shape(reference)?;
    pair.check()?;
    let c = &pair.context;
    let eta_theta = theta.score(c, &pair.winner)? - theta.score(c, &pair.loser)?;
    let eta_ref = reference.score(c, &pair.winner)? - reference.score(c, &pair.loser)?;
    Ok(eta_theta - eta_ref)
}

/// The pair logit together with its gradient in `theta`. The reference
/// contributes a constant.
pub fn pair_log_ratio_grad(
    theta: &Mlp,
    reference: &Mlp,
    pair: &PreferencePair,
) -> Result<(f64, Vec<f64>)> {
    theta.same_shape(reference)?;
    pair.check()?;
    let c = &pair.context;
    let tw = theta.forward_trace(&joined(c, &pair.winner))?;
    let tl = theta.forward_trace(&joined(c, &pair.loser))?;
    let eta_ref = reference.score(c, &pair.winner)? - reference.score(c, &pair.loser)?;
    let logit = (tw.output()[0] - tl.output()[0]) - eta_ref;
    let mut grad = vec![0.0; theta.params().len()];
    theta.backward(&tw, &[1.0], &mut grad);
    theta.backward(&tl, &[-1.0], &mut grad);
    Ok((logit, grad))
}

/// A differentiable pair logit over network parameters: either the scorer
/// log-ratio or the diffusion error difference.
///
/// `Draw` is the per-pair randomness the logit consumes. One draw is shared
/// by every ensemble member evaluated on the pair, so member disagreement is
/// never confounded with sampling noise.
pub trait PairModel {
    type Draw;

    /// Checkpoint tag of the networks this model trains.
    fn kind(&self) -> &'static str;

    fn init_network(&self, context_dim: usize, item_dim: usize, hidden: &[usize], seed: u64)
        -> Mlp;

    fn draw(&self, seed: u64, tags: &[u64], pair: &PreferencePair) -> Self::Draw;

    fn logit(
        &self,
        theta: &Mlp,
        reference: &Mlp,
        pair: &PreferencePair,
        draw: &Self::Draw,
    ) -> Result<f64>;

    fn logit_grad(
        &self,
        theta: &Mlp,
        reference: &Mlp,
        pair: &PreferencePair,
        draw: &Self::Draw,
    ) -> Result<(f64, Vec<f64>)>;

    /// Logit used for held-out evaluation, drawn from a stream reserved for
    /// evaluation.
    fn eval_logit(
        &self,
        theta: &Mlp,
        reference: &Mlp,
        pair: &PreferencePair,
        seed: u64,
    ) -> Result<f64> {
        let draw = self.draw(seed, &[rng::EVAL_DRAW], pair);
        self.logit(theta, reference, pair, &draw)
    }
}

pub const SCORER_INIT_SCALE: f64 = 0.1;

/// Feed-forward scorer over the concatenated `[context, item]` vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScorerModel;

impl ScorerModel {
    pub fn architecture(context_dim: usize, item_dim: usize, hidden: &[usize]) -> Architecture {
        Architecture {
            input: context_dim + item_dim,
            hidden: hidden.to_vec(),
            output: 1,
            activation: Activation::Tanh,
            bias: true,
        }
    }
}

impl PairModel for ScorerModel {
    type Draw = ();

    fn kind(&self) -> &'static str {
        "scorer"
    }

    fn init_network(
        &self,
        context_dim: usize,
        item_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Mlp {
        let arch = Self::architecture(context_dim, item_dim, hidden);
        Mlp::random_normal(arch, SCORER_INIT_SCALE, &mut rng_for(seed, &[rng::INIT]))
    }

    fn draw(&self, _seed: u64, _tags: &[u64], _pair: &PreferencePair) {}

    fn logit(
        &self,
        theta: &Mlp,
        reference: &Mlp,
        pair: &PreferencePair,
        _draw: &(),
    ) -> Result<f64> {
        pair_log_ratio(theta, reference, pair)
    }

    fn logit_grad(
        &self,
        theta: &Mlp,
        reference: &Mlp,
        pair: &PreferencePair,
        _draw: &(),
    ) -> Result<(f64, Vec<f64>)> {
        pair_log_ratio_grad(theta, reference, pair)
    }
}

pub(crate) fn require_same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected {a}, got {b}"
        )));
    }
    Ok(())
}
