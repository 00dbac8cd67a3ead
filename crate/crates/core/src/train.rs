//! Training loop: Adam with global-norm clipping, seeded per-step batches,
//! checkpoints that carry the optimiser state, and exact resume.
//!
//! Step `k` draws its batch indices, timesteps, noise and dropout masks
//! from `substream(seed, Train, k)` alone, so a run resumed from a
//! checkpoint at step `k` repeats the uninterrupted run's later steps.

use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ContainerReader, Quadruplet};
use crate::diffusion::{training_loss, Batch, Dropout};
use crate::nets::{checkpoint, ModelConfig, ModelState, ParamStore};
use crate::rng::{substream, Stream};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Steps between checkpoints; the final step is always written.
    pub checkpoint_every: u64,
    pub dropout: Dropout,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 16,
            learning_rate: 1e-4,
            clip_norm: 1.0,
            checkpoint_every: 1000,
            dropout: Dropout::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return bad("train steps, batch_size and checkpoint_every must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be positive");
        }
        let d = &self.dropout;
        if [d.context, d.controller, d.cmm].iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("dropout probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Random access to training quadruplets.
pub trait Source {
    fn len(&self) -> usize;
    fn res(&self) -> usize;
    fn get(&mut self, index: usize) -> Result<Quadruplet>;
}

impl Source for Vec<Quadruplet> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn res(&self) -> usize {
        self.first().map_or(0, |q| q.x_ref.res)
    }

    fn get(&mut self, index: usize) -> Result<Quadruplet> {
        self.as_slice()
            .get(index)
            .cloned()
            .ok_or_else(|| Error::contract(format!("record {index} out of range")))
    }
}

impl Source for ContainerReader {
    fn len(&self) -> usize {
        ContainerReader::len(self)
    }

    fn res(&self) -> usize {
        self.header().res
    }

    fn get(&mut self, index: usize) -> Result<Quadruplet> {
        self.read(index)
    }
}

/// Adam with bias correction, preceded by clipping of the global gradient
/// norm.
#[derive(Debug)]
pub struct Adam {
    pub lr: f64,
    pub clip_norm: f64,
    names: Vec<String>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, clip_norm: f64) -> Result<Self> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let m = params
            .iter()
            .map(|(_, v)| v.as_tensor().zeros_like())
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Adam {
            lr,
            clip_norm,
            names,
            v: m.clone(),
            m,
        })
    }

    /// Update number `t` (1-based). Returns the pre-clip gradient norm; a
    /// non-finite norm leaves every parameter untouched.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, t: u64) -> Result<f64> {
        let mut grad_list = Vec::with_capacity(self.names.len());
        let mut sq = 0.0f64;
        for name in &self.names {
            let var = params.get(name).expect("listed");
            let g = grads.get(var.as_tensor()).map(|g| g.detach());
            if let Some(g) = &g {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
            grad_list.push(g);
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Ok(norm);
        }
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        let t = t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, g) in grad_list.into_iter().enumerate() {
            // Parameters outside the loss graph keep their value and moments.
            let Some(g) = g else { continue };
            let g = (g * scale)?;
            self.m[i] = ((&self.m[i] * ADAM_BETA1)? + (&g * (1.0 - ADAM_BETA1))?)?;
            self.v[i] = ((&self.v[i] * ADAM_BETA2)? + (g.sqr()? * (1.0 - ADAM_BETA2))?)?;
            let m_hat = (&self.m[i] / bc1)?;
            let denom = ((&self.v[i] / bc2)?.sqrt()? + ADAM_EPS)?;
            let var = params.get(&self.names[i]).expect("listed");
            let next = (var.as_tensor() - (m_hat / denom)? * self.lr)?;
            var.set(&next.detach())?;
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
}

/// Metadata stored with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    pub step: u64,
    pub log: Vec<LogEntry>,
    /// Digest of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub config_digest: String,
}

#[derive(Debug)]
pub struct Trainer {
    pub model: ModelState,
    pub config: TrainConfig,
    pub seed: u64,
    pub step: u64,
    pub log: Vec<LogEntry>,
    pub config_digest: String,
    adam: Adam,
}

fn numerical(step: u64, detail: impl Into<String>) -> Error {
    Error::Numerical {
        location: format!("training step {}", step + 1),
        detail: detail.into(),
    }
}

impl Trainer {
    /// A fresh run; the model is initialised from `seed`.
    pub fn new(model: ModelConfig, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let model = ModelState::new(model, seed, DType::F32, &Device::Cpu)?;
        let adam = Adam::new(&model.params, config.learning_rate, config.clip_norm)?;
        Ok(Trainer {
            model,
            config,
            seed,
            step: 0,
            log: Vec::new(),
            config_digest: String::new(),
            adam,
        })
    }

    pub fn check_data(&self, data: &dyn Source) -> Result<()> {
        if data.len() == 0 {
            return Err(Error::Config("training data is empty".into()));
        }
        if data.res() != self.model.res() {
            return Err(Error::Config(format!(
                "data resolution {} does not match model resolution {}",
                data.res(),
                self.model.res()
            )));
        }
        Ok(())
    }

    /// One optimiser step; returns the batch loss.
    pub fn train_step(&mut self, data: &mut dyn Source) -> Result<f64> {
        let mut rng = substream(self.seed, Stream::Train, self.step);
        let n = data.len();
        let items = (0..self.config.batch_size)
            .map(|_| data.get(rng.random_range(0..n)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Quadruplet> = items.iter().collect();
        let batch = Batch::from_quadruplets(&refs, self.model.dtype(), self.model.device())?;
        let out = training_loss(&self.model, &batch, &mut rng, &self.config.dropout).map_err(|e| match e {
            Error::Numerical { location, detail } => numerical(self.step, format!("{location}: {detail}")),
            other => other,
        })?;
        let loss = out.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = out.loss.backward()?;

        let norm = self.adam.step(&self.model.params, &grads, self.step + 1)?;
        if !norm.is_finite() {
            return Err(numerical(self.step, format!("gradient norm {norm}")));
        }
        self.step += 1;
        self.log.push(LogEntry { step: self.step, loss });
        Ok(loss)
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config.clone(),
            train: self.config.clone(),
            seed: self.seed,
            step: self.step,
            log: self.log.clone(),
            config_digest: self.config_digest.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = Vec::with_capacity(3 * self.adam.names.len());
        for (i, name) in self.adam.names.iter().enumerate() {
            let p = self.model.params.get(name).expect("listed");
            arrays.push((format!("param.{name}"), p.as_tensor().clone()));
            arrays.push((format!("adam_m.{name}"), self.adam.m[i].clone()));
            arrays.push((format!("adam_v.{name}"), self.adam.v[i].clone()));
        }
        let meta = serde_json::to_value(self.meta()).map_err(|e| Error::format(None, e.to_string()))?;
        checkpoint::write(path, &meta, &arrays)
    }

    /// Restores a run, optimiser state included.
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = checkpoint::read(path)?;
        let meta: CheckpointMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::format(None, format!("checkpoint meta: {e}")))?;
        let mut tr = Trainer::new(meta.model.clone(), meta.train.clone(), meta.seed)?;
        let dev = Device::Cpu;
        for (i, name) in tr.adam.names.iter().enumerate() {
            tr.model.params.assign(name, &ck.tensor(&format!("param.{name}"), &dev)?)?;
            tr.adam.m[i] = ck.tensor(&format!("adam_m.{name}"), &dev)?;
            tr.adam.v[i] = ck.tensor(&format!("adam_v.{name}"), &dev)?;
        }
        if meta.log.len() as u64 != meta.step {
            return Err(Error::format(None, "loss log length differs from step count"));
        }
        tr.step = meta.step;
        tr.log = meta.log;
        tr.config_digest = meta.config_digest;
        Ok(tr)
    }

    /// Trains up to `config.steps`, writing `ckpt-<step>.bin`, `latest.bin`
    /// and `loss.csv` under `out_dir` at each cadence point. A numerical
    /// fault aborts the run and leaves the last checkpoint untouched.
    pub fn run(&mut self, data: &mut dyn Source, out_dir: &Path, mut progress: impl FnMut(&LogEntry)) -> Result<()> {
        self.check_data(data)?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        while self.step < self.config.steps {
            self.train_step(data)?;
            progress(self.log.last().expect("just pushed"));
            if self.step % self.config.checkpoint_every == 0 || self.step == self.config.steps {
                self.save(&checkpoint_path(out_dir, self.step))?;
                self.save(&out_dir.join("latest.bin"))?;
                write_loss_log(&out_dir.join("loss.csv"), &self.log)?;
            }
        }
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt-{step:07}.bin"))
}

pub fn write_loss_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for e in log {
        s.push_str(&format!("{},{}\n", e.step, e.loss));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Model weights and metadata from a checkpoint, for inference.
pub fn load_model(path: &Path) -> Result<(ModelState, CheckpointMeta)> {
    let ck = checkpoint::read(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(ck.meta.clone()).map_err(|e| Error::format(None, format!("checkpoint meta: {e}")))?;
    let model = ModelState::new(meta.model.clone(), meta.seed, DType::F32, &Device::Cpu)?;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        model.params.assign(&name, &ck.tensor(&format!("param.{name}"), &Device::Cpu)?)?;
    }
    Ok((model, meta))
}

/// Mean loss over the first and last `window` entries.
pub fn smoothed_ends(log: &[LogEntry], window: usize) -> Option<(f64, f64)> {
    if window == 0 || log.len() < window {
        return None;
    }
    let mean = |s: &[LogEntry]| s.iter().map(|e| e.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&log[..window]), mean(&log[log.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            dropout: Dropout {
                context: 1.5,
                ..Dropout::default()
            },
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn smoothing() {
        let log: Vec<LogEntry> = (1..=4).map(|s| LogEntry { step: s, loss: s as f64 }).collect();
        assert_eq!(smoothed_ends(&log, 2), Some((1.5, 3.5)));
        assert_eq!(smoothed_ends(&log, 5), None);
    }
}
