//! The four verbs. Each validates its inputs before writing anything.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use controlface::dataset::{generate_corpus, write_container, ContainerReader};
use controlface::diffusion::{ddim_sample, image_to_latent, initial_noise, GuidanceMode, GuidanceSpec, SampleInputs};
use controlface::eval::{
    ablation_run, delta_grid, evaluate, generate, guidance_sweep, make_requests, sweep_plot, train_embedder,
    DeltaGridInfo, EvalReport, SweepTable,
};
use controlface::facegen::{make_control, render_face, ControlMaps, FaceParams};
use controlface::raster::Raster;
use controlface::train::{load_model, Trainer};
use controlface::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(None, e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub container_sha256: String,
    pub records: usize,
    pub identities: usize,
    pub held_out: usize,
    pub frames: usize,
    pub pairs_per_identity: usize,
    pub res: usize,
    pub reconstruction_mode: bool,
}

pub fn manifest_path(container: &Path) -> PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes the training split as a container plus `<out>.manifest.json`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let spec = cfg.corpus();
    let quads = generate_corpus(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_container(out, spec.res, &quads)?;
    let bytes = std::fs::read(out).map_err(|e| Error::io(out, e))?;
    let manifest = Manifest {
        config_digest: cfg.digest(),
        container_sha256: hex::encode(Sha256::digest(&bytes)),
        records: quads.len(),
        identities: spec.identities,
        held_out: spec.held_out,
        frames: spec.frames,
        pairs_per_identity: spec.pairs_per_identity,
        res: spec.res,
        reconstruction_mode: spec.reconstruction_mode,
    };
    write_json(&manifest_path(out), &manifest)?;
    Ok(manifest)
}

/// Trains from scratch, or continues the run stored in `resume`.
pub fn train(cfg: &RunConfig, data: &Path, out_dir: &Path, resume: Option<&Path>, log_every: u64) -> Result<Trainer> {
    let mut reader = ContainerReader::open(data)?;
    let digest = cfg.digest();
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::resume(p)?;
            if t.config_digest != digest {
                return Err(Error::Config(format!(
                    "{} was written under config digest {}, not {digest}",
                    p.display(),
                    t.config_digest
                )));
            }
            t
        }
        None => {
            let mut t = Trainer::new(cfg.model.clone(), cfg.train.clone(), cfg.seed)?;
            t.config_digest = digest;
            t
        }
    };
    trainer.run(&mut reader, out_dir, |e| {
        if log_every > 0 && e.step % log_every == 0 {
            eprintln!("step {} loss {:.6}", e.step, e.loss);
        }
    })?;
    Ok(trainer)
}

/// Where the reference comes from.
#[derive(Debug, Clone)]
pub enum Reference {
    /// A container record: its reference image and control.
    Record { data: PathBuf, index: usize },
    /// A bare image; no reference control is available.
    Image(PathBuf),
}

/// Where the target control comes from.
#[derive(Debug, Clone)]
pub enum Target {
    /// The target control of the reference record itself.
    OwnRecord,
    /// The target control of another record of the same container.
    Record(usize),
    /// Face parameters as JSON, rendered at the model resolution.
    Params(PathBuf),
}

#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub checkpoint: PathBuf,
    pub reference: Reference,
    pub target: Target,
    pub spec: GuidanceSpec,
    pub steps: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub record: Option<PathBuf>,
}

fn read_params(path: &Path) -> Result<FaceParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let p: FaceParams =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !p.in_bounds() {
        return Err(Error::Config(format!("{}: parameters out of bounds", path.display())));
    }
    Ok(p)
}

/// Samples one image; returns the number of recorded steps, if any.
pub fn sample(req: &SampleRequest) -> Result<Option<usize>> {
    let (model, _) = load_model(&req.checkpoint)?;
    let res = model.res();
    let (x_ref, d_ref, own_target, mut reader) = match &req.reference {
        Reference::Record { data, index } => {
            let mut r = ContainerReader::open(data)?;
            let q = r.read(*index)?;
            (q.x_ref, Some(q.d_ref), Some(q.d_tgt), Some(r))
        }
        Reference::Image(p) => (Raster::read_png(p)?, None, None, None),
    };
    let d_tgt: ControlMaps = match &req.target {
        Target::OwnRecord => own_target.ok_or_else(|| Error::Config("an image reference needs a target".into()))?,
        Target::Record(i) => match reader.as_mut() {
            Some(r) => r.read(*i)?.d_tgt,
            None => return Err(Error::Config("--target-index needs a container reference".into())),
        },
        Target::Params(p) => make_control(&render_face(&read_params(p)?, res)?)?,
    };
    if x_ref.res != res || x_ref.channels != 3 || d_tgt.res() != res {
        return Err(Error::shape(format!(
            "inputs at {}x{} / control {} for a {res}-pixel model",
            x_ref.res,
            x_ref.channels,
            d_tgt.res()
        )));
    }
    let (dt, dev) = (model.dtype(), model.device());
    let z_ref = image_to_latent(&x_ref.to_chw_tensor(dt, dev)?.unsqueeze(0)?)?;
    let d_tgt = d_tgt.data.to_chw_tensor(dt, dev)?.unsqueeze(0)?;
    let d_ref = d_ref
        .map(|d| -> Result<_> { Ok(d.data.to_chw_tensor(dt, dev)?.unsqueeze(0)?) })
        .transpose()?;
    let inputs = SampleInputs {
        z_ref: &z_ref,
        d_tgt: &d_tgt,
        d_ref: d_ref.as_ref(),
    };
    let noise = initial_noise(req.seed, &[0], res, dt, dev)?;
    let out = ddim_sample(&model, inputs, req.spec, req.steps, &noise, req.record.is_some())?;
    out.images[0].write_png(&req.out)?;
    match (&req.record, out.record) {
        (Some(p), Some(r)) => {
            r.write(p)?;
            Ok(Some(r.steps.len()))
        }
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub checkpoint_step: u64,
    pub guidance: GuidanceSpec,
    pub main: EvalReport,
    pub embedder_accuracy: Option<f64>,
    pub sweep: SweepTable,
    pub delta_grid: DeltaGridInfo,
    pub ablation: BTreeMap<String, EvalReport>,
}

/// Evaluates `checkpoint` on held-out identities and writes `report.json`,
/// `sweep.png` and `delta_grid.png` under `out_dir`.
pub fn report(cfg: &RunConfig, checkpoint: &Path, out_dir: &Path) -> Result<Report> {
    let held = cfg.corpus().held_out_seeds();
    if held.is_empty() {
        return Err(Error::Config("data.held_out: report needs at least one held-out identity".into()));
    }
    let (model, meta) = load_model(checkpoint)?;
    if model.res() != cfg.data.res {
        return Err(Error::Config(format!(
            "checkpoint resolution {} differs from data.res {}",
            model.res(),
            cfg.data.res
        )));
    }
    for a in &cfg.eval.ablation {
        if !a.checkpoint.exists() {
            return Err(Error::Missing(format!(
                "checkpoint for ablation '{}' at {}",
                a.name,
                a.checkpoint.display()
            )));
        }
    }
    let digest = cfg.digest();
    let eval = &cfg.eval;
    let sampling = cfg.sampling();
    let spec = GuidanceSpec::new(cfg.sample.mode, cfg.sample.w)?;
    let requests = make_requests(&held, eval.requests_per_attribute, cfg.data.res, cfg.request_seed())?;

    let embedder = if held.len() >= 2 {
        Some(train_embedder(&held, cfg.data.res, &eval.embedder, cfg.embedder_seed())?)
    } else {
        None
    };
    let images = generate(&model, &requests, spec, &sampling)?;
    let main = evaluate(&images, &requests, embedder.as_ref(), &eval.fit, &digest)?;
    let sweep = guidance_sweep(&model, &requests, &eval.modes, &eval.w_grid, &sampling, &eval.fit)?;
    let grid_w = if cfg.sample.mode == GuidanceMode::None { 1.0 } else { cfg.sample.w };
    let (grid, grid_info) = delta_grid(&model, &requests[eval.delta_request], grid_w, eval.delta_rows, &sampling)?;
    let ablation = ablation_run(&eval.ablation, &requests, embedder.as_ref(), &sampling, &eval.fit, &digest)?;

    let report = Report {
        config_digest: digest,
        checkpoint_step: meta.step,
        guidance: spec,
        main,
        embedder_accuracy: embedder.as_ref().and_then(|e| e.accuracy),
        sweep,
        delta_grid: grid_info,
        ablation,
    };
    create_dir(out_dir)?;
    write_json(&out_dir.join("report.json"), &report)?;
    sweep_plot(&report.sweep).write_png(&out_dir.join("sweep.png"))?;
    grid.write_png(&out_dir.join("delta_grid.png"))?;
    Ok(report)
}
