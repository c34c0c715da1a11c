//! Toy denoising-diffusion backend: a small noise-prediction network on 2-D
//! points, scored with the Diffusion-DPO pair logit.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::datagen::{Dataset, DatasetMeta, LabelMode};
use crate::error::{Error, Result};
use crate::mlp::{Activation, Architecture, Mlp};
use crate::policy::{require_same_len, PairModel};
use crate::rng::{self, rng_for};
use crate::types::PreferencePair;

pub const DEFAULT_STEPS: usize = 100;
pub const TIME_FEATURES: usize = 5;
const EVAL_DRAWS: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// Cumulative signal fractions, index 0..=T, with `alphas_bar[0] == 1`.
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.len() < 2 || alphas_bar[0] != 1.0 {
            return Err(Error::InvalidConfig {
                field: "alphas_bar",
            });
        }
        let ok = alphas_bar.windows(2).all(|w| w[1] < w[0])
            && alphas_bar.iter().all(|&a| a > 0.0 && a <= 1.0);
        if !ok {
            return Err(Error::InvalidConfig {
                field: "alphas_bar",
            });
        }
        Ok(Self { alphas_bar })
    }

    /// `alphas_bar[1..=T]` linear from `first` to `last`.
    pub fn linear(steps: usize, first: f64, last: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig { field: "T" });
        }
        let mut a = vec![1.0];
        if steps == 1 {
            a.push(last);
        } else {
            let span = (steps - 1) as f64;
            a.extend((0..steps).map(|i| first + (last - first) * i as f64 / span));
            a[steps] = last;
        }
        Self::new(a)
    }

    pub fn steps(&self) -> usize {
        self.alphas_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }

    fn check(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            return Err(Error::OutOfRange {
                t,
                lo,
                hi: self.steps(),
            });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, 0.9999, 1e-4).expect("default schedule is valid")
    }
}

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
pub fn forward_diffuse(
    schedule: &NoiseSchedule,
    x0: &[f64],
    t: usize,
    noise: &[f64],
) -> Result<Vec<f64>> {
    schedule.check(t, 0)?;
    require_same_len("noise length", x0.len(), noise.len())?;
    let a = schedule.alpha_bar(t);
    let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| s * x + n * e).collect())
}

pub fn time_embedding(t: usize, steps: usize) -> [f64; TIME_FEATURES] {
    let u = t as f64 / steps as f64;
    [
        u,
        (PI * u).sin(),
        (PI * u).cos(),
        (2.0 * PI * u).sin(),
        (2.0 * PI * u).cos(),
    ]
}

fn denoiser_input(x_t: &[f64], t: usize, steps: usize, context: &[f64]) -> Vec<f64> {
    x_t.iter()
        .copied()
        .chain(time_embedding(t, steps))
        .chain(context.iter().copied())
        .collect()
}

/// Shared randomness for one pair: a timestep and one noise vector per item.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDraw {
    pub t: usize,
    pub noise_w: Vec<f64>,
    pub noise_l: Vec<f64>,
}

fn sq_err(noise: &[f64], predicted: &[f64]) -> f64 {
    noise
        .iter()
        .zip(predicted)
        .map(|(n, e)| (n - e) * (n - e))
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn pair_logit_impl(
    theta: &Mlp,
    reference: &Mlp,
    pair: &PreferencePair,
    t: usize,
    noise_w: &[f64],
    noise_l: &[f64],
    schedule: &NoiseSchedule,
    omega: f64,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    theta.ensure_same_shape(reference)?;
    pair.check()?;
    schedule.check(t, 1)?;
    let d = pair.winner.len();
    require_same_len("denoiser output", theta.architecture().output, d)?;
    require_same_len("noise_w length", d, noise_w.len())?;
    require_same_len("noise_l length", d, noise_l.len())?;
    let steps = schedule.steps();
    let scale = -(steps as f64) * omega;

    let x_w = forward_diffuse(schedule, &pair.winner, t, noise_w)?;
    let x_l = forward_diffuse(schedule, &pair.loser, t, noise_l)?;
    let in_w = denoiser_input(&x_w, t, steps, &pair.context);
    let in_l = denoiser_input(&x_l, t, steps, &pair.context);

    let tw = theta.forward_trace(&in_w)?;
    let tl = theta.forward_trace(&in_l)?;
    let ref_w = reference.forward(&in_w)?;
    let ref_l = reference.forward(&in_l)?;

    let term_w = sq_err(noise_w, tw.output()) - sq_err(noise_w, &ref_w);
    let term_l = sq_err(noise_l, tl.output()) - sq_err(noise_l, &ref_l);
    let logit = scale * (term_w - term_l);

    let grad = want_grad.then(|| {
        // d||n - e||^2 / de = 2 (e - n)
        let gw: Vec<f64> = tw
            .output()
            .iter()
            .zip(noise_w)
            .map(|(e, n)| scale * 2.0 * (e - n))
            .collect();
        let gl: Vec<f64> = tl
            .output()
            .iter()
            .zip(noise_l)
            .map(|(e, n)| -scale * 2.0 * (e - n))
            .collect();
        let mut g = vec![0.0; theta.params().len()];
        theta.backward(&tw, &gw, &mut g);
        theta.backward(&tl, &gl, &mut g);
        g
    });
    Ok((logit, grad))
}

/// Diffusion-DPO pair logit:
/// `-T omega [(|n_w - e_theta(x_t^w)|^2 - |n_w - e_ref(x_t^w)|^2) - (same for the loser)]`.
/// The pair loss is `-log sigmoid(beta * logit)`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_pair_logit(
    theta: &Mlp,
    reference: &Mlp,
    pair: &PreferencePair,
    t: usize,
    noise_w: &[f64],
    noise_l: &[f64],
    schedule: &NoiseSchedule,
    omega: f64,
) -> Result<f64> {
    pair_logit_impl(
        theta, reference, pair, t, noise_w, noise_l, schedule, omega, false,
    )
    .map(|(l, _)| l)
}

#[allow(clippy::too_many_arguments)]
pub fn diffusion_pair_logit_grad(
    theta: &Mlp,
    reference: &Mlp,
    pair: &PreferencePair,
    t: usize,
    noise_w: &[f64],
    noise_l: &[f64],
    schedule: &NoiseSchedule,
    omega: f64,
) -> Result<(f64, Vec<f64>)> {
    pair_logit_impl(
        theta, reference, pair, t, noise_w, noise_l, schedule, omega, true,
    )
    .map(|(l, g)| (l, g.unwrap()))
}

/// Denoiser `e(x_t, time features, c) -> R^{d_x}` trained with the
/// Diffusion-DPO logit. The timestep weight omega is a constant.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    pub omega: f64,
}

impl Default for DiffusionModel {
    fn default() -> Self {
        Self {
            schedule: NoiseSchedule::default(),
            omega: 1.0,
        }
    }
}

impl DiffusionModel {
    pub fn architecture(context_dim: usize, item_dim: usize, hidden: &[usize]) -> Architecture {
        Architecture {
            input: item_dim + TIME_FEATURES + context_dim,
            hidden: hidden.to_vec(),
            output: item_dim,
            activation: Activation::Tanh,
            bias: true,
        }
    }
}

impl PairModel for DiffusionModel {
    type Draw = DiffusionDraw;

    fn kind(&self) -> &'static str {
        "denoiser"
    }

    fn init_network(
        &self,
        context_dim: usize,
        item_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Mlp {
        let arch = Self::architecture(context_dim, item_dim, hidden);
        Mlp::random_normal(arch, 0.1, &mut rng_for(seed, &[rng::INIT]))
    }

    fn draw(&self, seed: u64, tags: &[u64], pair: &PreferencePair) -> DiffusionDraw {
        let mut all = tags.to_vec();
        all.extend([rng::DIFFUSION_DRAW, pair.pair_id]);
        let mut r = rng_for(seed, &all);
        let t = r.random_range(1..=self.schedule.steps());
        let d = pair.winner.len();
        let noise_w = (0..d).map(|_| r.sample(StandardNormal)).collect();
        let noise_l = (0..d).map(|_| r.sample(StandardNormal)).collect();
        DiffusionDraw {
            t,
            noise_w,
            noise_l,
        }
    }

    fn logit(
        &self,
        theta: &Mlp,
        reference: &Mlp,
        pair: &PreferencePair,
        draw: &DiffusionDraw,
    ) -> Result<f64> {
        diffusion_pair_logit(
            theta,
            reference,
            pair,
            draw.t,
            &draw.noise_w,
            &draw.noise_l,
            &self.schedule,
            self.omega,
        )
    }

    fn logit_grad(
        &self,
        theta: &Mlp,
        reference: &Mlp,
        pair: &PreferencePair,
        draw: &DiffusionDraw,
    ) -> Result<(f64, Vec<f64>)> {
        diffusion_pair_logit_grad(
            theta,
            reference,
            pair,
            draw.t,
            &draw.noise_w,
            &draw.noise_l,
            &self.schedule,
            self.omega,
        )
    }

    /// Mean logit over a fixed set of evaluation draws.
    fn eval_logit(
        &self,
        theta: &Mlp,
        reference: &Mlp,
        pair: &PreferencePair,
        seed: u64,
    ) -> Result<f64> {
        let mut sum = 0.0;
        for k in 0..EVAL_DRAWS {
            let draw = self.draw(seed, &[rng::EVAL_DRAW, k], pair);
            sum += self.logit(theta, reference, pair, &draw)?;
        }
        Ok(sum / EVAL_DRAWS as f64)
    }
}

pub const RING_RADIUS: f64 = 2.0;
const WINNER_SPREAD: f64 = 0.25;
const LOSER_SPREAD: f64 = 0.75;
const LOSER_SHIFT: [f64; 2] = [0.75, 0.75];

/// 2-D preference data: under a one-hot context choosing one of two mixture
/// components on a ring, the winner is a tight sample around the component
/// center and the loser a blurred, shifted one.
pub fn sample_ring_dataset(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let pairs = (0..n as u64)
        .map(|pair_id| {
            let mut r = rng_for(seed, &[rng::TRAIN_DATA, pair_id]);
            let k = r.random_range(0..2usize);
            let angle = PI * k as f64;
            let center = [RING_RADIUS * angle.cos(), RING_RADIUS * angle.sin()];
            let mut context = vec![0.0; 2];
            context[k] = 1.0;
            let winner = (0..2)
                .map(|i| center[i] + WINNER_SPREAD * r.sample::<f64, _>(StandardNormal))
                .collect();
            let loser = (0..2)
                .map(|i| {
                    center[i] + LOSER_SHIFT[i] + LOSER_SPREAD * r.sample::<f64, _>(StandardNormal)
                })
                .collect();
            PreferencePair {
                pair_id,
                context,
                winner,
                loser,
                flipped: Some(false),
            }
        })
        .collect();
    Ok(Dataset {
        pairs,
        meta: DatasetMeta {
            n,
            context_dim: 2,
            item_dim: 2,
            seed,
            flip_rate: 0.0,
            label_mode: LabelMode::Deterministic,
            source: "ring".into(),
            flip_seed: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nets(seed: u64) -> (Mlp, Mlp) {
        let m = DiffusionModel::default();
        let theta = m.init_network(2, 2, &[16, 16], seed);
        let mut reference = m.init_network(2, 2, &[16, 16], seed + 100);
        reference.params_mut().iter_mut().for_each(|p| *p *= 2.0);
        (theta, reference)
    }

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert!((s.alpha_bar(100) - 1e-4).abs() < 1e-18);
        assert!(NoiseSchedule::new(vec![1.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::new(vec![0.9, 0.5]).is_err());
    }

    #[test]
    fn diffuse_endpoints() {
        let s = NoiseSchedule::default();
        let x0 = [0.3, -1.2];
        let noise = [0.5, 2.0];
        assert_eq!(forward_diffuse(&s, &x0, 0, &noise).unwrap(), x0.to_vec());
        let xt = forward_diffuse(&s, &[0.0, 0.0], 100, &noise).unwrap();
        let k = (1.0f64 - 1e-4).sqrt();
        assert!((xt[0] - 0.5 * k).abs() < 1e-15 && (xt[1] - 2.0 * k).abs() < 1e-15);
        assert!(matches!(
            forward_diffuse(&s, &x0, 101, &noise),
            Err(Error::OutOfRange { .. })
        ));
    }

    #[test]
    fn diffused_variance_matches_moments() {
        let s = NoiseSchedule::default();
        let t = 40;
        let mut r = rng_for(5, &[]);
        let n = 10_000;
        // x0 ~ N(0, 4) coordinate-wise.
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let x0: Vec<f64> = (0..2)
                    .map(|_| 2.0 * r.sample::<f64, _>(StandardNormal))
                    .collect();
                let e: Vec<f64> = (0..2).map(|_| r.sample(StandardNormal)).collect();
                forward_diffuse(&s, &x0, t, &e).unwrap()
            })
            .collect();
        let expected = s.alpha_bar(t) * 4.0 + 1.0 - s.alpha_bar(t);
        for i in 0..2 {
            let mean = samples.iter().map(|x| x[i]).sum::<f64>() / n as f64;
            let var = samples.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(
                (var / expected - 1.0).abs() < 0.05,
                "var {var} vs {expected}"
            );
        }
    }

    #[test]
    fn logit_identities() {
        let (theta, reference) = nets(1);
        let ds = sample_ring_dataset(5, 0).unwrap();
        let m = DiffusionModel::default();
        for p in &ds.pairs {
            let d = m.draw(3, &[], p);
            assert_eq!(m.logit(&theta, &theta, p, &d).unwrap(), 0.0);
            let l = m.logit(&theta, &reference, p, &d).unwrap();
            let swapped = p.swapped();
            let ls = diffusion_pair_logit(
                &theta,
                &reference,
                &swapped,
                d.t,
                &d.noise_l,
                &d.noise_w,
                &m.schedule,
                1.0,
            )
            .unwrap();
            assert!((l + ls).abs() <= 1e-12 * l.abs().max(1.0));
            let doubled = diffusion_pair_logit(
                &theta,
                &reference,
                p,
                d.t,
                &d.noise_w,
                &d.noise_l,
                &m.schedule,
                2.0,
            )
            .unwrap();
            assert!((doubled - 2.0 * l).abs() <= 1e-12 * l.abs().max(1.0));
        }
    }

    #[test]
    fn doubling_step_count_doubles_logit() {
        let (theta, reference) = nets(2);
        let p = &sample_ring_dataset(1, 4).unwrap().pairs[0];
        // Same abar and same t/T (hence same time features) at t=2 of 2 and
        // t=4 of 4, so only the T factor differs.
        let short = NoiseSchedule::new(vec![1.0, 0.9, 0.5]).unwrap();
        let long = NoiseSchedule::new(vec![1.0, 0.95, 0.9, 0.7, 0.5]).unwrap();
        let nw = [0.4, -0.3];
        let nl = [1.1, 0.2];
        let a = diffusion_pair_logit(&theta, &reference, p, 2, &nw, &nl, &short, 1.0).unwrap();
        let b = diffusion_pair_logit(&theta, &reference, p, 4, &nw, &nl, &long, 1.0).unwrap();
        assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0), "{a} {b}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (theta, reference) = nets(3);
        let m = DiffusionModel::default();
        let ds = sample_ring_dataset(10, 1).unwrap();
        for p in &ds.pairs {
            let d = m.draw(9, &[], p);
            let (l, g) = m.logit_grad(&theta, &reference, p, &d).unwrap();
            assert_eq!(l, m.logit(&theta, &reference, p, &d).unwrap());
            let h = 1e-5;
            let num: Vec<f64> = (0..g.len())
                .map(|i| {
                    let mut a = theta.clone();
                    a.params_mut()[i] += h;
                    let mut b = theta.clone();
                    b.params_mut()[i] -= h;
                    (m.logit(&a, &reference, p, &d).unwrap()
                        - m.logit(&b, &reference, p, &d).unwrap())
                        / (2.0 * h)
                })
                .collect();
            let diff: f64 = g
                .iter()
                .zip(&num)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff / norm < 1e-5, "relative error {}", diff / norm);
        }
    }

    #[test]
    fn logit_rejects_bad_timestep_and_shapes() {
        let (theta, reference) = nets(4);
        let p = &sample_ring_dataset(1, 0).unwrap().pairs[0];
        let s = NoiseSchedule::default();
        let e = [0.0, 0.0];
        assert!(matches!(
            diffusion_pair_logit(&theta, &reference, p, 0, &e, &e, &s, 1.0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            diffusion_pair_logit(&theta, &reference, p, 1, &e[..1], &e, &s, 1.0),
            Err(Error::ShapeMismatch(_))
        ));
        let other = DiffusionModel::default().init_network(2, 2, &[8], 0);
        assert!(matches!(
            diffusion_pair_logit(&theta, &other, p, 1, &e, &e, &s, 1.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn ring_data_prefers_tight_samples() {
        let ds = sample_ring_dataset(200, 3).unwrap();
        assert_eq!(ds.meta.item_dim, 2);
        for p in &ds.pairs {
            assert_eq!(p.context.iter().sum::<f64>(), 1.0);
        }
    }
}
