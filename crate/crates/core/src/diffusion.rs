//! Noise schedule, closed-form forward corruption, the noise-prediction loss
//! and a DDPM ancestral sampler.
//!
//! Timesteps are 1-based throughout: `t ∈ 1..=T`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::DiffusionRng;
use crate::tensor::{Real, Tensor};

/// Linear beta schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    /// The standard 1000-step linear schedule, `1e-4 → 0.02`.
    pub const STANDARD: ScheduleConfig = ScheduleConfig {
        timesteps: 1000,
        beta_start: 1e-4,
        beta_end: 0.02,
    };

    /// The standard schedule compressed to `timesteps` steps, with both beta
    /// endpoints scaled by `1000 / timesteps` so the terminal signal level
    /// stays comparable.
    pub fn compressed(timesteps: usize) -> ScheduleConfig {
        let k = 1000.0 / timesteps as f64;
        ScheduleConfig {
            timesteps,
            beta_start: Self::STANDARD.beta_start * k,
            beta_end: Self::STANDARD.beta_end * k,
        }
    }

    /// Desk-scale profile: 100 compressed steps.
    pub fn desk() -> ScheduleConfig {
        Self::compressed(100)
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        build_schedule(self.timesteps, self.beta_start, self.beta_end)
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear schedule with both endpoints included.
pub fn build_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs T >= 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        let step = (beta_end - beta_start) / (timesteps - 1) as f64;
        (0..timesteps).map(|i| beta_start + step * i as f64).collect()
    };
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`. Not taped.
pub fn forward_sample<S: Real>(
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<S>> {
    let i = schedule.check(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} does not match image shape {:?}",
            eps.shape(),
            x0.shape()
        )));
    }
    let ab = schedule.alpha_bars[i];
    let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Uniform draw from `1..=T`.
pub fn sample_timestep(rng: &mut DiffusionRng, timesteps: usize) -> usize {
    1 + rng.below(timesteps as u64) as usize
}

pub fn gaussian_like<S: Real>(rng: &mut DiffusionRng, shape: &[usize]) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::of(rng.normal())).collect())
        .expect("shape and length agree")
}

/// A noise predictor `ε_θ(x_t, t)`.
pub trait Denoiser<S: Real> {
    /// Per-graph handles (e.g. parameter leaves).
    type Bound;

    fn image_shape(&self) -> [usize; 3];

    fn bind(&self, g: &mut Graph<S>) -> Self::Bound;

    /// Predicted noise, same shape as `xt`.
    fn predict(&self, g: &mut Graph<S>, bound: &Self::Bound, xt: &Tensor<S>, t: usize) -> Result<Var>;
}

/// Mean squared error between `eps` and the prediction on the corrupted image.
pub fn denoise_loss_with_noise<S: Real, D: Denoiser<S>>(
    g: &mut Graph<S>,
    model: &D,
    bound: &D::Bound,
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let shape = model.image_shape();
    if x0.shape() != shape {
        return Err(Error::Shape(format!(
            "image shape {:?} does not match model shape {shape:?}",
            x0.shape()
        )));
    }
    let xt = forward_sample(x0, t, eps, schedule)?;
    let pred = model.predict(g, bound, &xt, t)?;
    let target = g.constant(eps.clone());
    let diff = g.sub(target, pred)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Draws `ε ~ N(0, I)` and returns the taped noise-prediction loss.
pub fn denoise_loss<S: Real, D: Denoiser<S>>(
    g: &mut Graph<S>,
    model: &D,
    bound: &D::Bound,
    x0: &Tensor<S>,
    t: usize,
    rng: &mut DiffusionRng,
    schedule: &NoiseSchedule,
) -> Result<Var> {
    let eps = gaussian_like(rng, x0.shape());
    denoise_loss_with_noise(g, model, bound, x0, t, &eps, schedule)
}

/// DDPM reverse chain from `x_steps ~ N(0, I)` down to `x̂_0`, using
/// `σ_t² = β_t` and no noise on the final step.
pub fn ancestral_sample<S: Real, D: Denoiser<S>>(
    model: &D,
    schedule: &NoiseSchedule,
    rng: &mut DiffusionRng,
    steps: usize,
) -> Result<Tensor<S>> {
    let x = gaussian_like::<S>(rng, &model.image_shape());
    ancestral_sample_from(model, schedule, rng, x, steps)
}

/// Reverse chain starting from a given `x_steps`.
pub fn ancestral_sample_from<S: Real, D: Denoiser<S>>(
    model: &D,
    schedule: &NoiseSchedule,
    rng: &mut DiffusionRng,
    mut x: Tensor<S>,
    steps: usize,
) -> Result<Tensor<S>> {
    if steps == 0 || steps > schedule.timesteps() {
        return Err(Error::Contract(format!(
            "sampler steps {steps} outside 1..={}",
            schedule.timesteps()
        )));
    }
    for t in (1..=steps).rev() {
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let pred = model.predict(&mut g, &bound, &x, t)?;
        let eps = g.value(pred).data();
        let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let sigma = schedule.beta(t).sqrt();
        let noise = (t > 1).then(|| gaussian_like::<S>(rng, x.shape()));
        let next: Vec<S> = x
            .data()
            .iter()
            .zip(eps)
            .enumerate()
            .map(|(i, (&xv, &e))| {
                let mean = inv_sqrt_alpha * (xv.as_f64() - coef * e.as_f64());
                let z = noise.as_ref().map_or(0.0, |n| n.data()[i].as_f64());
                S::of(mean + sigma * z)
            })
            .collect();
        x = Tensor::new(x.shape().to_vec(), next)?;
    }
    Ok(x)
}
