//! Identity embedder: a four-layer conv classifier over the training
//! identities whose L2-normalised 64-dimensional penultimate features stand
//! in for a face-recognition embedding.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::cosine;
use crate::facegen::render::render_face;
use crate::facegen::{sample_identity, sample_state, FaceParams};
use crate::nets::layers::{Conv2d, Linear};
use crate::nets::ParamStore;
use crate::raster::Raster;
use crate::rng::{mix, substream, Stream};
use crate::train::Adam;
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 64;
const WIDTHS: [usize; 4] = [16, 32, 64, FEATURE_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub images_per_identity: usize,
    pub eval_images_per_identity: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Held-in accuracy required before the embedder may be used.
    pub target_accuracy: f64,
    pub check_every: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            images_per_identity: 16,
            eval_images_per_identity: 4,
            batch_size: 32,
            learning_rate: 1e-3,
            max_steps: 4000,
            target_accuracy: 0.95,
            check_every: 100,
        }
    }
}

#[derive(Debug)]
pub struct IdentityEmbedder {
    params: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
    pub res: usize,
    pub classes: usize,
    /// Held-in accuracy reached by training; `None` before training.
    pub accuracy: Option<f64>,
    pub target_accuracy: f64,
    pub steps: usize,
}

impl IdentityEmbedder {
    pub fn new(res: usize, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config("identity embedder needs at least two identities".into()));
        }
        let mut ps = ParamStore::new(mix(seed, Stream::Embedder as u64), DType::F32, &Device::Cpu);
        let mut convs = Vec::new();
        let mut c = 3;
        for (i, w) in WIDTHS.iter().enumerate() {
            let stride = if i + 1 < WIDTHS.len() { 2 } else { 1 };
            convs.push(Conv2d::with_init(
                &mut ps,
                &format!("embedder.conv{i}"),
                c,
                *w,
                3,
                stride,
                crate::nets::Init::TruncNormal((2.0 / (9 * c) as f64).sqrt()),
                true,
            )?);
            c = *w;
        }
        let head = Linear::new(&mut ps, "embedder.head", FEATURE_DIM, classes, true)?;
        Ok(IdentityEmbedder {
            params: ps,
            convs,
            head,
            res,
            classes,
            accuracy: None,
            target_accuracy: 0.95,
            steps: 0,
        })
    }

    pub fn is_ready(&self) -> bool {
        self.accuracy.is_some_and(|a| a >= self.target_accuracy)
    }

    /// Unnormalised penultimate features of `(B, 3, R, R)` images in `[0, 1]`.
    fn raw_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.affine(2.0, -1.0)?;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i + 1 < self.convs.len() {
                h = h.silu()?;
            }
        }
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.raw_features(x)?)
    }

    /// L2-normalised features, one vector per image.
    pub fn embed(&self, images: &[Raster]) -> Result<Vec<Vec<f32>>> {
        if !self.is_ready() {
            return Err(Error::contract(match self.accuracy {
                None => "identity embedder is untrained".to_string(),
                Some(a) => format!("identity embedder reached only {a:.3} held-in accuracy"),
            }));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let refs: Vec<&Raster> = chunk.iter().collect();
            let x = Raster::batch_tensor(&refs, DType::F32, &Device::Cpu)?;
            let f = self.raw_features(&x)?;
            let n = f.sqr()?.sum_keepdim(1)?.sqrt()?.clamp(1e-12, f64::INFINITY)?;
            let f = f.broadcast_div(&n)?;
            for row in f.to_vec2::<f32>()? {
                out.push(row);
            }
        }
        Ok(out)
    }

    fn accuracy_on(&self, images: &[Raster], labels: &[u32]) -> Result<f64> {
        let mut correct = 0usize;
        for (chunk, lab) in images.chunks(64).zip(labels.chunks(64)) {
            let refs: Vec<&Raster> = chunk.iter().collect();
            let x = Raster::batch_tensor(&refs, DType::F32, &Device::Cpu)?;
            let pred = self.logits(&x)?.argmax(1)?.to_vec1::<u32>()?;
            correct += pred.iter().zip(lab).filter(|(p, l)| p == l).count();
        }
        Ok(correct as f64 / images.len() as f64)
    }
}

/// Renders `per_identity` random states of every identity.
fn render_set(identity_seeds: &[u64], per_identity: usize, res: usize, seed: u64) -> Result<(Vec<Raster>, Vec<u32>)> {
    let jobs: Vec<(usize, usize)> = (0..identity_seeds.len())
        .flat_map(|i| (0..per_identity).map(move |k| (i, k)))
        .collect();
    let images = jobs
        .par_iter()
        .map(|&(i, k)| {
            let id = sample_identity(identity_seeds[i]);
            let state = sample_state(&id, mix(mix(seed, identity_seeds[i]), k as u64));
            Ok(render_face(&FaceParams::new(id, state), res)?.image)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((images, jobs.iter().map(|(i, _)| *i as u32).collect()))
}

/// Trains a classifier over `identity_seeds` until its accuracy on fresh
/// renders of the same identities reaches the target, or the step budget
/// runs out.
pub fn train_embedder(identity_seeds: &[u64], res: usize, cfg: &EmbedderConfig, seed: u64) -> Result<IdentityEmbedder> {
    let mut emb = IdentityEmbedder::new(res, identity_seeds.len(), seed)?;
    emb.target_accuracy = cfg.target_accuracy;
    let (train_x, train_y) = render_set(identity_seeds, cfg.images_per_identity, res, mix(seed, 1))?;
    let (eval_x, eval_y) = render_set(identity_seeds, cfg.eval_images_per_identity, res, mix(seed, 2))?;
    let mut adam = Adam::new(&emb.params, cfg.learning_rate, 10.0)?;
    let dev = Device::Cpu;
    for step in 0..cfg.max_steps {
        let mut rng = substream(seed, Stream::Embedder, step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train_x.len())).collect();
        let refs: Vec<&Raster> = idx.iter().map(|i| &train_x[*i]).collect();
        let x = Raster::batch_tensor(&refs, DType::F32, &dev)?;
        let y = Tensor::from_vec(idx.iter().map(|i| train_y[*i]).collect::<Vec<u32>>(), idx.len(), &dev)?;
        let loss = candle_nn::loss::cross_entropy(&emb.logits(&x)?, &y)?;
        let grads = loss.backward()?;
        let norm = adam.step(&emb.params, &grads, step as u64 + 1)?;
        if !norm.is_finite() {
            return Err(Error::Numerical {
                location: format!("embedder step {}", step + 1),
                detail: format!("gradient norm {norm}"),
            });
        }
        emb.steps = step + 1;
        if emb.steps % cfg.check_every == 0 || emb.steps == cfg.max_steps {
            let acc = emb.accuracy_on(&eval_x, &eval_y)?;
            emb.accuracy = Some(acc);
            if acc >= cfg.target_accuracy {
                break;
            }
        }
    }
    Ok(emb)
}

/// Mean cosine between the features of paired images.
pub fn identity_similarity(generated: &[Raster], references: &[Raster], embedder: &IdentityEmbedder) -> Result<f64> {
    if generated.len() != references.len() || generated.is_empty() {
        return Err(Error::contract("identity similarity needs equal, non-empty image lists"));
    }
    let a = embedder.embed(generated)?;
    let b = embedder.embed(references)?;
    Ok(a.iter().zip(&b).map(|(x, y)| cosine(x, y)).sum::<f64>() / a.len() as f64)
}
