//! Linear noise schedule, forward noising, the noise-prediction loss and
//! ancestral / deterministic samplers.

#[allow(unused_imports)] // resolves to inherent methods when std is linked
use num_traits::Float;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

/// Per-timestep noise rates. Timesteps are 1-based: `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(alloc::format!(
                "beta bounds must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(DiffusionSchedule { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }
}

pub fn make_schedule(steps: usize, kind: ScheduleKind, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule> {
    DiffusionSchedule::new(steps, kind, beta_min, beta_max)
}

/// `√ᾱₜ·z0 + √(1−ᾱₜ)·ε`
pub fn forward_diffuse<R: Real>(
    z0: &Tensor<R>,
    t: usize,
    epsilon: &Tensor<R>,
    sched: &DiffusionSchedule,
) -> Result<Tensor<R>> {
    sched.check_t(t)?;
    if z0.shape() != epsilon.shape() {
        return Err(Error::shape("forward_diffuse", z0.shape(), epsilon.shape()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (R::of(ab.sqrt()), R::of((1.0 - ab).sqrt()));
    let data = z0.data().iter().zip(epsilon.data()).map(|(&z, &e)| a * z + b * e).collect();
    Tensor::new(z0.shape(), data)
}

/// One noised training example.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample<R> {
    pub epsilon: Tensor<R>,
    pub t: usize,
    pub z_t: Tensor<R>,
}

impl<R: Real> NoiseSample<R> {
    pub fn draw(z0: &Tensor<R>, t: usize, sched: &DiffusionSchedule, rng: &mut Stream) -> Result<Self> {
        let epsilon = rng::normal_tensor(rng, z0.shape());
        let z_t = forward_diffuse(z0, t, &epsilon, sched)?;
        Ok(NoiseSample { epsilon, t, z_t })
    }
}

/// Mean squared error between true and predicted noise, recorded on the tape.
pub fn diffusion_loss<R: Real>(tape: &mut Tape<R>, epsilon: Var, epsilon_hat: Var) -> Result<Var> {
    if tape.value(epsilon).len() != tape.value(epsilon_hat).len() {
        return Err(Error::shape("diffusion_loss", tape.shape(epsilon), tape.shape(epsilon_hat)));
    }
    let d = tape.sub(epsilon_hat, epsilon)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// One ancestral step `z_t → z_{t−1}` with `σₜ² = βₜ`. The noise term is
/// dropped at `t = 1`.
pub fn ddpm_step<R: Real>(
    z_t: &Tensor<R>,
    t: usize,
    epsilon_hat: &Tensor<R>,
    sched: &DiffusionSchedule,
    noise: &Tensor<R>,
) -> Result<Tensor<R>> {
    sched.check_t(t)?;
    if z_t.shape() != epsilon_hat.shape() || z_t.shape() != noise.shape() {
        return Err(Error::shape("ddpm_step", z_t.shape(), epsilon_hat.shape()));
    }
    let beta = sched.beta(t);
    let inv_sqrt_alpha = R::of(1.0 / sched.alpha(t).sqrt());
    let coef = R::of(beta / (1.0 - sched.alpha_bar(t)).sqrt());
    let sigma = if t == 1 { R::zero() } else { R::of(beta.sqrt()) };
    let data = z_t
        .data()
        .iter()
        .zip(epsilon_hat.data())
        .zip(noise.data())
        .map(|((&z, &e), &n)| inv_sqrt_alpha * (z - coef * e) + sigma * n)
        .collect();
    Tensor::new(z_t.shape(), data)
}

/// Anything that predicts the noise in a batch of latents at timestep `t`.
/// Conditioning is carried by the implementor.
pub trait NoisePredictor<R: Real> {
    fn predict(&self, z_t: &Tensor<R>, t: usize) -> Result<Tensor<R>>;
}

impl<R: Real, F> NoisePredictor<R> for F
where
    F: Fn(&Tensor<R>, usize) -> Result<Tensor<R>>,
{
    fn predict(&self, z_t: &Tensor<R>, t: usize) -> Result<Tensor<R>> {
        self(z_t, t)
    }
}

/// Timesteps retained by a `steps`-step deterministic sampler, ascending.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(alloc::format!(
            "sampler steps must be in 1..={total}, got {steps}"
        )));
    }
    Ok((1..=steps)
        .map(|i| ((i * total) as f64 / steps as f64).round() as usize)
        .collect())
}

/// Deterministic (η = 0) sampling from `z_T` over a sub-sampled chain.
pub fn ddim_sample<R: Real, M: NoisePredictor<R> + ?Sized>(
    z_top: &Tensor<R>,
    model: &M,
    sched: &DiffusionSchedule,
    steps: usize,
) -> Result<Tensor<R>> {
    let taus = ddim_timesteps(sched.steps(), steps)?;
    let mut z = z_top.clone();
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let eps = model.predict(&z, t)?;
        if eps.shape() != z.shape() {
            return Err(Error::shape("ddim_sample", z.shape(), eps.shape()));
        }
        let ab = sched.alpha_bar(t);
        let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bar(taus[i - 1]) };
        let inv_sqrt_ab = R::of(1.0 / ab.sqrt());
        let sqrt_1m_ab = R::of((1.0 - ab).sqrt());
        let (sa_prev, sb_prev) = (R::of(ab_prev.sqrt()), R::of((1.0 - ab_prev).sqrt()));
        let data: Vec<R> = z
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&zt, &e)| {
                let x0 = (zt - sqrt_1m_ab * e) * inv_sqrt_ab;
                sa_prev * x0 + sb_prev * e
            })
            .collect();
        z = Tensor::new(z.shape(), data)?;
        z.check_finite("ddim_sample")?;
    }
    Ok(z)
}

/// Full ancestral sampling over all `T` steps.
pub fn ddpm_sample<R: Real, M: NoisePredictor<R> + ?Sized>(
    z_top: &Tensor<R>,
    model: &M,
    sched: &DiffusionSchedule,
    rng: &mut Stream,
) -> Result<Tensor<R>> {
    let mut z = z_top.clone();
    for t in (1..=sched.steps()).rev() {
        let eps = model.predict(&z, t)?;
        let noise = if t > 1 {
            rng::normal_tensor(rng, z.shape())
        } else {
            Tensor::zeros(z.shape())
        };
        z = ddpm_step(&z, t, &eps, sched, &noise)?;
        z.check_finite("ddpm_sample")?;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddim,
    Ddpm,
}
