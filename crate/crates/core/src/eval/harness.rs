//! Sampling over request sets, guidance sweeps and ablations.

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::embedder::{identity_similarity, IdentityEmbedder};
use super::metrics::{appearance_consistency, reinference_error, FitConfig, ReinferenceTable};
use super::requests::RigRequest;
use crate::diffusion::{ddim_sample, image_to_latent, initial_noise, GuidanceMode, GuidanceSpec, SampleInputs, TrajectoryRecord};
use crate::nets::ModelState;
use crate::raster::Raster;
use crate::train::load_model;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            steps: 50,
            batch_size: 8,
            seed: 0,
        }
    }
}

struct Stacked {
    z_ref: Tensor,
    d_ref: Tensor,
    d_tgt: Tensor,
    noise: Tensor,
}

fn stack(model: &ModelState, chunk: &[RigRequest], seed: u64) -> Result<Stacked> {
    let (dt, dev) = (model.dtype(), model.device());
    let x: Vec<&Raster> = chunk.iter().map(|r| &r.quad.x_ref).collect();
    let dr: Vec<&Raster> = chunk.iter().map(|r| &r.quad.d_ref.data).collect();
    let dtg: Vec<&Raster> = chunk.iter().map(|r| &r.quad.d_tgt.data).collect();
    let idx: Vec<u64> = chunk.iter().map(|r| r.index).collect();
    Ok(Stacked {
        z_ref: image_to_latent(&Raster::batch_tensor(&x, dt, dev)?)?,
        d_ref: Raster::batch_tensor(&dr, dt, dev)?,
        d_tgt: Raster::batch_tensor(&dtg, dt, dev)?,
        noise: initial_noise(seed, &idx, model.res(), dt, dev)?,
    })
}

fn check_res(model: &ModelState, requests: &[RigRequest]) -> Result<()> {
    if let Some(r) = requests.iter().find(|r| r.res() != model.res()) {
        return Err(Error::Config(format!(
            "request {} at resolution {} for a {}-pixel model",
            r.index,
            r.res(),
            model.res()
        )));
    }
    Ok(())
}

/// Samples one image per request. The starting noise of request `i`
/// depends only on `(seed, i)`.
pub fn generate(
    model: &ModelState,
    requests: &[RigRequest],
    spec: GuidanceSpec,
    sampling: &SamplingConfig,
) -> Result<Vec<Raster>> {
    check_res(model, requests)?;
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(sampling.batch_size.max(1)) {
        let s = stack(model, chunk, sampling.seed)?;
        let inputs = SampleInputs {
            z_ref: &s.z_ref,
            d_tgt: &s.d_tgt,
            d_ref: Some(&s.d_ref),
        };
        out.extend(ddim_sample(model, inputs, spec, sampling.steps, &s.noise, false)?.images);
    }
    Ok(out)
}

/// Samples one request and keeps the per-step record.
pub fn generate_recorded(
    model: &ModelState,
    request: &RigRequest,
    spec: GuidanceSpec,
    sampling: &SamplingConfig,
) -> Result<(Raster, TrajectoryRecord)> {
    check_res(model, std::slice::from_ref(request))?;
    let s = stack(model, std::slice::from_ref(request), sampling.seed)?;
    let inputs = SampleInputs {
        z_ref: &s.z_ref,
        d_tgt: &s.d_tgt,
        d_ref: Some(&s.d_ref),
    };
    let out = ddim_sample(model, inputs, spec, sampling.steps, &s.noise, true)?;
    let image = out.images.into_iter().next().expect("one image");
    Ok((image, out.record.expect("recording requested")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reinference: ReinferenceTable,
    /// Mean cosine between generated images and their references.
    pub id_similarity: Option<f64>,
    /// Same, against a reference of a different identity.
    pub id_similarity_cross: Option<f64>,
    /// Off-face MSE against the reference.
    pub appearance_mse: Option<f64>,
    /// Same, against a reference of a different identity.
    pub appearance_mse_shuffled: Option<f64>,
    pub sample_count: usize,
    pub config_digest: String,
    pub flags: Vec<String>,
}

/// For request `i`, the next request (cyclically) of another identity.
fn cross_partner(requests: &[RigRequest], i: usize) -> Option<usize> {
    let n = requests.len();
    let own = requests[i].quad.meta.identity_seed;
    (1..n).map(|k| (i + k) % n).find(|j| requests[*j].quad.meta.identity_seed != own)
}

/// Scores generated images against their requests.
pub fn evaluate(
    generated: &[Raster],
    requests: &[RigRequest],
    embedder: Option<&IdentityEmbedder>,
    fit: &FitConfig,
    config_digest: &str,
) -> Result<EvalReport> {
    let mut flags = Vec::new();
    let reinference = reinference_error(generated, requests, fit)?;
    if !reinference.valid {
        flags.push("reinference_invalid".to_string());
    }
    let refs: Vec<Raster> = requests.iter().map(|r| r.quad.x_ref.clone()).collect();
    let masks: Vec<Vec<bool>> = requests.iter().map(|r| r.off_face.clone()).collect();
    let partners: Option<Vec<usize>> = (0..requests.len()).map(|i| cross_partner(requests, i)).collect();
    let cross_refs: Option<Vec<Raster>> = partners.map(|p| p.iter().map(|j| refs[*j].clone()).collect());
    if cross_refs.is_none() {
        flags.push("single_identity_request_set".to_string());
    }

    let (mut id_sim, mut id_cross) = (None, None);
    match embedder {
        Some(e) if e.is_ready() && !generated.is_empty() => {
            id_sim = Some(identity_similarity(generated, &refs, e)?);
            if let Some(c) = &cross_refs {
                id_cross = Some(identity_similarity(generated, c, e)?);
            }
        }
        Some(_) => flags.push("embedder_not_ready".to_string()),
        None => flags.push("no_embedder".to_string()),
    }
    let mut appearance = None;
    let mut shuffled = None;
    match appearance_consistency(generated, &refs, &masks) {
        Ok(v) => {
            appearance = Some(v);
            if let Some(c) = &cross_refs {
                shuffled = Some(appearance_consistency(generated, c, &masks)?);
            }
        }
        Err(Error::Contract(m)) => flags.push(format!("appearance: {m}")),
        Err(e) => return Err(e),
    }
    Ok(EvalReport {
        reinference,
        id_similarity: id_sim,
        id_similarity_cross: id_cross,
        appearance_mse: appearance,
        appearance_mse_shuffled: shuffled,
        sample_count: generated.len(),
        config_digest: config_digest.to_string(),
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub modes: Vec<GuidanceMode>,
    pub w_grid: Vec<f64>,
    /// `rows[m][k]`: mode `m` at scale `w_grid[k]`.
    pub rows: Vec<Vec<ReinferenceTable>>,
}

impl SweepTable {
    pub fn averages(&self, mode: usize) -> Vec<Option<f64>> {
        self.rows[mode].iter().map(|t| t.average).collect()
    }
}

/// Re-inference error for every `(mode, w)` on one request set, with shared
/// seeds.
pub fn guidance_sweep(
    model: &ModelState,
    requests: &[RigRequest],
    modes: &[GuidanceMode],
    w_grid: &[f64],
    sampling: &SamplingConfig,
    fit: &FitConfig,
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let mut row = Vec::with_capacity(w_grid.len());
        for w in w_grid {
            let images = generate(model, requests, GuidanceSpec::new(*mode, *w)?, sampling)?;
            row.push(reinference_error(&images, requests, fit)?);
        }
        rows.push(row);
    }
    Ok(SweepTable {
        modes: modes.to_vec(),
        w_grid: w_grid.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationEntry {
    pub name: String,
    pub checkpoint: PathBuf,
    pub mode: GuidanceMode,
    pub w: f64,
}

/// One report per named configuration, all on the same requests and seeds.
pub fn ablation_run(
    entries: &[AblationEntry],
    requests: &[RigRequest],
    embedder: Option<&IdentityEmbedder>,
    sampling: &SamplingConfig,
    fit: &FitConfig,
    config_digest: &str,
) -> Result<BTreeMap<String, EvalReport>> {
    let mut out = BTreeMap::new();
    for e in entries {
        if out.contains_key(&e.name) {
            return Err(Error::Config(format!("ablation name '{}' listed twice", e.name)));
        }
        if !e.checkpoint.exists() {
            return Err(Error::Missing(format!(
                "checkpoint for ablation '{}' at {}",
                e.name,
                e.checkpoint.display()
            )));
        }
        let (model, _) = load_model(&e.checkpoint)?;
        let images = generate(&model, requests, GuidanceSpec::new(e.mode, e.w)?, sampling)?;
        out.insert(e.name.clone(), evaluate(&images, requests, embedder, fit, config_digest)?);
    }
    Ok(out)
}
