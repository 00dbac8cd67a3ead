//! Linear β schedule and the closed-form forward process.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, `ᾱ_t = Π_{s≤t} (1 − β_s)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
    if steps < 10 {
        return Err(Error::Config(format!("schedule needs at least 10 steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas_bar = betas
        .iter()
        .scan(1.0, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    Ok(Schedule { betas, alphas_bar })
}

impl Schedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        make_schedule(c.steps, c.beta_start, c.beta_end)
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `ᾱ_t` for `t ∈ 1..=T`.
    pub fn alpha_bar(&self, t: u32) -> Result<f64> {
        if t == 0 || t as usize > self.steps() {
            return Err(Error::contract(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(self.alphas_bar[t as usize - 1])
    }

    /// One value per sample, shaped to broadcast over `(B, …)`.
    fn per_sample(&self, like: &Tensor, ts: &[u32], f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let b = like.dim(0)?;
        if ts.len() != b {
            return Err(Error::shape(format!("{} timesteps for batch {b}", ts.len())));
        }
        let v = ts
            .iter()
            .map(|t| self.alpha_bar(*t).map(&f))
            .collect::<Result<Vec<f64>>>()?;
        let mut shape = vec![1usize; like.rank()];
        shape[0] = b;
        Ok(Tensor::from_vec(v, shape, like.device())?.to_dtype(like.dtype())?)
    }

    /// `z_t = √ᾱ_t · z + √(1 − ᾱ_t) · ε`, per sample.
    pub fn forward_diffuse(&self, z: &Tensor, ts: &[u32], eps: &Tensor) -> Result<Tensor> {
        if z.dims() != eps.dims() {
            return Err(Error::shape(format!("z {:?} vs eps {:?}", z.dims(), eps.dims())));
        }
        let a = self.per_sample(z, ts, f64::sqrt)?;
        let s = self.per_sample(z, ts, |ab| (1.0 - ab).sqrt())?;
        Ok((z.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
    }

    /// `(z_t − √(1 − ᾱ_t) · ε̂) / √ᾱ_t`, per sample.
    pub fn predict_x0(&self, z_t: &Tensor, eps_hat: &Tensor, ts: &[u32]) -> Result<Tensor> {
        if z_t.dims() != eps_hat.dims() {
            return Err(Error::shape(format!("z_t {:?} vs eps {:?}", z_t.dims(), eps_hat.dims())));
        }
        let s = self.per_sample(z_t, ts, |ab| (1.0 - ab).sqrt())?;
        let inv = self.per_sample(z_t, ts, |ab| 1.0 / ab.sqrt())?;
        Ok((z_t - eps_hat.broadcast_mul(&s)?)?.broadcast_mul(&inv)?)
    }

    /// Strided timestep subsequence for `n` sampling steps, ascending and
    /// ending at `T`: `τ_i = round((i + 1) · T / n)`.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<u32>> {
        let t = self.steps();
        if n == 0 || n > t {
            return Err(Error::contract(format!("sampling steps {n} outside 1..={t}")));
        }
        Ok((0..n)
            .map(|i| (((i + 1) * t) as f64 / n as f64).round() as u32)
            .collect())
    }
}
