//! Deterministic DDIM sampling (η = 0) with an optional per-step record.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, StandardNormal};

use super::batch::latent_to_image;
use super::guidance::{guided_epsilon, prepare_guidance, GuidanceSpec, SampleInputs};
use crate::nets::ModelState;
use crate::raster::Raster;
use crate::rng::{substream, Stream};
use crate::{Error, Result};

/// One denoising step: the guidance delta (zero without a baseline) and the
/// predicted clean image, both unclipped and mapped back to image units.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: u32,
    /// `cond − base` in noise units, one raster per sample.
    pub delta: Vec<Raster>,
    /// Predicted `x₀` in `[0, 1]` image units (not clipped).
    pub x0: Vec<Raster>,
}

/// Steps in sampling order (from `T` down).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    /// Final images clipped to `[0, 1]`.
    pub images: Vec<Raster>,
    pub record: Option<TrajectoryRecord>,
}

/// Unit Gaussian starting noise for batch entry `index` of a seeded job.
pub fn initial_noise(seed: u64, indices: &[u64], res: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let per = 3 * res * res;
    let mut v = Vec::with_capacity(per * indices.len());
    for &i in indices {
        let mut rng = substream(seed, Stream::Sample, i);
        v.extend((0..per).map(|_| -> f32 { StandardNormal.sample(&mut rng) }));
    }
    Ok(Tensor::from_vec(v, (indices.len(), 3, res, res), device)?.to_dtype(dtype)?)
}

fn rasters(t: &Tensor) -> Result<Vec<Raster>> {
    (0..t.dim(0)?).map(|i| Raster::from_chw_tensor(&t.get(i)?)).collect()
}

fn check_finite(t: &Tensor, step: usize, what: &str) -> Result<()> {
    let ok = t
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::Numerical {
            location: format!("sampling step {step}"),
            detail: format!("non-finite {what}"),
        })
    }
}

/// DDIM from `noise` over `steps` strided timesteps.
pub fn ddim_sample(
    model: &ModelState,
    inputs: SampleInputs<'_>,
    spec: GuidanceSpec,
    steps: usize,
    noise: &Tensor,
    record: bool,
) -> Result<SampleOutput> {
    let schedule = &model.schedule;
    let taus = schedule.sampling_timesteps(steps)?;
    let prepared = prepare_guidance(model, spec, inputs)?;
    let b = noise.dim(0)?;
    let mut z = noise.to_dtype(model.dtype())?;
    let mut rec = record.then(TrajectoryRecord::default);
    for (k, i) in (0..taus.len()).rev().enumerate() {
        let t = taus[i];
        let ts = vec![t; b];
        // Sampling needs no gradients; detaching keeps the graph from
        // growing across steps.
        let (eps, delta) = guided_epsilon(model, &prepared, &z, &ts)?;
        let eps = eps.detach();
        check_finite(&eps, k, "noise prediction")?;
        let x0 = schedule.predict_x0(&z, &eps, &ts)?;
        let ab_prev = if i == 0 { 1.0 } else { schedule.alpha_bar(taus[i - 1])? };
        z = ((&x0 * ab_prev.sqrt())? + (&eps * (1.0 - ab_prev).sqrt())?)?.detach();
        check_finite(&z, k, "latent")?;
        if let Some(r) = rec.as_mut() {
            let delta = match delta {
                Some(d) => d,
                None => eps.zeros_like()?,
            };
            r.steps.push(StepRecord {
                t,
                delta: rasters(&delta)?,
                x0: rasters(&latent_to_image(&x0)?)?,
            });
        }
    }
    let images = latent_to_image(&z)?.clamp(0.0, 1.0)?;
    Ok(SampleOutput {
        images: rasters(&images)?,
        record: rec,
    })
}

pub const RECORD_MAGIC: &[u8; 4] = b"CFT1";
pub const RECORD_VERSION: u32 = 1;

impl TrajectoryRecord {
    /// `"CFT1" | version | steps | batch | res | (t | (delta | x0)·batch)·steps
    /// | crc32`, little-endian, rasters HWC float32.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let batch = self.steps.first().map_or(0, |s| s.x0.len());
        let res = self.steps.first().and_then(|s| s.x0.first()).map_or(0, |r| r.res);
        let mut out = Vec::new();
        out.extend_from_slice(RECORD_MAGIC);
        for v in [RECORD_VERSION, self.steps.len() as u32, batch as u32, res as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.steps {
            if s.delta.len() != batch || s.x0.len() != batch {
                return Err(Error::shape("ragged trajectory record"));
            }
            out.extend_from_slice(&s.t.to_le_bytes());
            for (d, x) in s.delta.iter().zip(&s.x0) {
                for r in [d, x] {
                    if r.res != res || r.channels != 3 {
                        return Err(Error::shape("trajectory raster shape"));
                    }
                    for v in &r.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != RECORD_MAGIC {
            return Err(Error::format(None, "not a trajectory record"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
            return Err(Error::format(None, "checksum mismatch"));
        }
        let word = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes"));
        if word(4) != RECORD_VERSION {
            return Err(Error::format(None, "unsupported record version"));
        }
        let (n, batch, res) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let per = 3 * res * res;
        if body.len() != 20 + n * (4 + batch * 2 * per * 4) {
            return Err(Error::format(None, "record length mismatch"));
        }
        let mut pos = 20;
        let mut steps = Vec::with_capacity(n);
        let take = |pos: &mut usize| -> Result<Raster> {
            let data = body[*pos..*pos + 4 * per]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            *pos += 4 * per;
            Raster::new(res, 3, data)
        };
        for _ in 0..n {
            let t = u32::from_le_bytes(body[pos..pos + 4].try_into().expect("4 bytes"));
            pos += 4;
            let mut delta = Vec::with_capacity(batch);
            let mut x0 = Vec::with_capacity(batch);
            for _ in 0..batch {
                delta.push(take(&mut pos)?);
                x0.push(take(&mut pos)?);
            }
            steps.push(StepRecord { t, delta, x0 });
        }
        Ok(TrajectoryRecord { steps })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
