use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear β schedule. Steps are 1-based; `alpha_bar(0) == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct ScheduleParams {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one step".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range must satisfy 0 < start <= end < 1 (got {beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = (0..timesteps)
        .map(|i| {
            if timesteps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        beta_start,
        beta_end,
        beta,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior variance `β̃_t = (1-ᾱ_{t-1}) / (1-ᾱ_t) · β_t`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(())
    }

    pub(crate) fn params(&self) -> ScheduleParams {
        ScheduleParams {
            timesteps: self.timesteps(),
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }
}

/// `z_t = sqrt(ᾱ_t)·z0 + sqrt(1-ᾱ_t)·ε`.
pub fn q_sample(z0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    schedule.check_step(t)?;
    if z0.len() != eps.len() {
        return Err(Error::shape(
            "q_sample",
            format!("z0 {} vs eps {}", z0.len(), eps.len()),
        ));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0
        .iter()
        .zip(eps)
        .map(|(&z, &e)| (a * z as f64 + b * e as f64) as f32)
        .collect())
}

/// Sinusoidal embedding of a timestep: `[sin(t·f_i)..., cos(t·f_i)...]`, `f_i = 10000^(-i/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * f).sin();
        out[half + i] = (t as f64 * f).cos();
    }
    out
}
