//! Noise-prediction training objective with conditioning dropout.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::schedule::Schedule;
use crate::nets::{CondInputs, Keep, ModelState};
use crate::{Error, Result};

/// Independent per-sample probabilities of zeroing each conditioning input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dropout {
    pub context: f64,
    pub controller: f64,
    pub cmm: f64,
}

impl Default for Dropout {
    fn default() -> Self {
        Dropout {
            context: 0.1,
            controller: 0.1,
            cmm: 0.1,
        }
    }
}

impl Dropout {
    pub const NONE: Dropout = Dropout {
        context: 0.0,
        controller: 0.0,
        cmm: 0.0,
    };
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Scalar loss with its autograd graph.
    pub loss: Tensor,
    /// Per-sample mean squared error.
    pub per_sample: Vec<f64>,
    pub timesteps: Vec<u32>,
}

/// Random draws of one training step.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub timesteps: Vec<u32>,
    pub eps: Tensor,
    pub keep: Keep,
}

fn bernoulli_keep<R: Rng>(rng: &mut R, n: usize, p: f64, like: &Tensor) -> Result<Option<Tensor>> {
    if p <= 0.0 {
        return Ok(None);
    }
    let keep: Vec<f32> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 }).collect();
    Ok(Some(Tensor::from_vec(keep, n, like.device())?.to_dtype(like.dtype())?))
}

/// Draws `t ~ U{1..T}`, `ε ~ N(0, I)` and the dropout masks, in that order.
pub fn draw_step_noise<R: Rng>(
    rng: &mut R,
    schedule: &Schedule,
    like: &Tensor,
    dropout: &Dropout,
) -> Result<StepNoise> {
    let b = like.dim(0)?;
    let timesteps: Vec<u32> = (0..b).map(|_| rng.random_range(1..=schedule.steps() as u32)).collect();
    let eps: Vec<f64> = (0..like.elem_count()).map(|_| StandardNormal.sample(rng)).collect();
    let eps = Tensor::from_vec(eps, like.dims(), like.device())?.to_dtype(like.dtype())?;
    let keep = Keep {
        context: bernoulli_keep(rng, b, dropout.context, like)?,
        controller: bernoulli_keep(rng, b, dropout.controller, like)?,
        cmm: bernoulli_keep(rng, b, dropout.cmm, like)?,
    };
    Ok(StepNoise { timesteps, eps, keep })
}

/// Mean over samples of the per-element squared error. A non-finite sample
/// is reported by index.
pub fn noise_prediction_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    if eps_hat.dims() != eps.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", eps_hat.dims(), eps.dims())));
    }
    let b = eps.dim(0)?;
    let per = (eps_hat - eps)?.sqr()?.reshape((b, ()))?.mean(1)?;
    let values = per.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            location: format!("training loss, sample {i}"),
            detail: format!("loss {}", values[i]),
        });
    }
    Ok((per.mean_all()?, values))
}

/// The objective with an arbitrary noise predictor
/// `predict(z_t, timesteps, keep)`.
pub fn training_loss_with<R: Rng>(
    schedule: &Schedule,
    batch: &Batch,
    rng: &mut R,
    dropout: &Dropout,
    predict: impl FnOnce(&Tensor, &[u32], &Keep) -> Result<Tensor>,
) -> Result<LossOutput> {
    let noise = draw_step_noise(rng, schedule, &batch.z_tgt, dropout)?;
    let z_t = schedule.forward_diffuse(&batch.z_tgt, &noise.timesteps, &noise.eps)?;
    let eps_hat = predict(&z_t, &noise.timesteps, &noise.keep)?;
    let (loss, per_sample) = noise_prediction_loss(&eps_hat, &noise.eps)?;
    Ok(LossOutput {
        loss,
        per_sample,
        timesteps: noise.timesteps,
    })
}

/// The target latent is noised; the model sees the clean reference, the
/// target control (controller and CMM target slot) and the reference
/// control.
pub fn training_loss<R: Rng>(
    model: &ModelState,
    batch: &Batch,
    rng: &mut R,
    dropout: &Dropout,
) -> Result<LossOutput> {
    training_loss_with(&model.schedule, batch, rng, dropout, |z_t, ts, keep| {
        let inputs = CondInputs {
            x_ref: &batch.z_ref,
            d_ref: &batch.d_ref,
            controller: &batch.d_tgt,
            cmm_target: &batch.d_tgt,
        };
        let cond = model.condition(inputs, keep)?;
        model.denoise_forward(z_t, ts, &cond)
    })
}
