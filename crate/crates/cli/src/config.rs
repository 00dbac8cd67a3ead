//! Run configuration: one strict JSON document for every command.

use std::path::Path;

use controlface::dataset::trajectory::MAX_TRAJECTORY_LEN;
use controlface::dataset::CorpusSpec;
use controlface::diffusion::schedule::make_schedule;
use controlface::diffusion::{GuidanceMode, GuidanceSpec};
use controlface::eval::{AblationEntry, EmbedderConfig, FitConfig, SamplingConfig};
use controlface::facegen::render::check_resolution;
use controlface::nets::ModelConfig;
use controlface::rng::mix;
use controlface::train::TrainConfig;
use controlface::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Upper bound on identity counts, to catch typos before hours of work.
pub const MAX_IDENTITIES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub identities: usize,
    /// Identities kept out of the container for evaluation.
    pub held_out: usize,
    pub frames: usize,
    pub pairs_per_identity: usize,
    pub res: usize,
    /// Reference and target are the same frame.
    pub reconstruction_mode: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = CorpusSpec::default();
        DataConfig {
            identities: c.identities,
            held_out: c.held_out,
            frames: c.frames,
            pairs_per_identity: c.pairs_per_identity,
            res: c.res,
            reconstruction_mode: c.reconstruction_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub mode: GuidanceMode,
    pub w: f64,
    pub steps: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            mode: GuidanceMode::Rcg,
            w: 4.0,
            steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub requests_per_attribute: usize,
    pub batch_size: usize,
    pub w_grid: Vec<f64>,
    pub modes: Vec<GuidanceMode>,
    /// Timesteps shown in the delta grid, at most the number of DDIM steps.
    pub delta_rows: usize,
    /// Request index visualised in the delta grid.
    pub delta_request: usize,
    pub fit: FitConfig,
    pub embedder: EmbedderConfig,
    pub ablation: Vec<AblationEntry>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            requests_per_attribute: 256,
            batch_size: 8,
            w_grid: (0..7).map(|k| 1.0 + 0.5 * k as f64).collect(),
            modes: vec![
                GuidanceMode::CfgContext,
                GuidanceMode::CfgController,
                GuidanceMode::CfgCmm,
                GuidanceMode::Rcg,
            ],
            delta_rows: 5,
            delta_request: 0,
            fit: FitConfig::default(),
            embedder: EmbedderConfig::default(),
            ablation: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub eval: EvalConfig,
}

fn field(name: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{name}: {msg}"))
}

fn range<T: PartialOrd + std::fmt::Display>(name: &str, v: T, lo: T, hi: T) -> Result<()> {
    if v < lo || v > hi {
        return Err(field(name, format!("{v} outside {lo}..={hi}")));
    }
    Ok(())
}

impl RunConfig {
    /// Parses and validates; unknown keys and out-of-range values are
    /// configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        range("data.identities", d.identities, 1, MAX_IDENTITIES)?;
        range("data.held_out", d.held_out, 0, MAX_IDENTITIES)?;
        range("data.frames", d.frames, 2, MAX_TRAJECTORY_LEN)?;
        range("data.pairs_per_identity", d.pairs_per_identity, 1, 1 << 16)?;
        check_resolution(d.res).map_err(|e| field("data.res", e))?;

        self.model.net.validate().map_err(|e| field("model.net", e))?;
        let s = &self.model.schedule;
        make_schedule(s.steps, s.beta_start, s.beta_end).map_err(|e| field("model.schedule", e))?;
        if d.res != self.model.net.res {
            return Err(field(
                "model.net.res",
                format!("{} differs from data.res {}", self.model.net.res, d.res),
            ));
        }
        self.train.validate().map_err(|e| field("train", e))?;

        let sm = &self.sample;
        GuidanceSpec::new(sm.mode, sm.w).map_err(|e| field("sample.w", e))?;
        range("sample.steps", sm.steps, 1, s.steps)?;

        let e = &self.eval;
        range("eval.requests_per_attribute", e.requests_per_attribute, 1, 1 << 16)?;
        range("eval.batch_size", e.batch_size, 1, 4096)?;
        if e.w_grid.is_empty() {
            return Err(field("eval.w_grid", "is empty"));
        }
        if e.w_grid.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(field("eval.w_grid", "values must be finite and >= 0"));
        }
        if e.w_grid.windows(2).any(|p| p[1] <= p[0]) {
            return Err(field("eval.w_grid", "must be strictly increasing"));
        }
        if e.modes.is_empty() {
            return Err(field("eval.modes", "is empty"));
        }
        if (1..e.modes.len()).any(|i| e.modes[..i].contains(&e.modes[i])) {
            return Err(field("eval.modes", "lists a mode twice"));
        }
        range("eval.delta_rows", e.delta_rows, 1, 1024)?;
        range("eval.delta_request", e.delta_request, 0, 4 * e.requests_per_attribute - 1)?;
        range("eval.fit.starts", e.fit.starts, 1, 1024)?;
        let em = &e.embedder;
        for (name, v) in [
            ("images_per_identity", em.images_per_identity),
            ("eval_images_per_identity", em.eval_images_per_identity),
            ("batch_size", em.batch_size),
            ("max_steps", em.max_steps),
            ("check_every", em.check_every),
        ] {
            range(&format!("eval.embedder.{name}"), v, 1, 1 << 24)?;
        }
        if !(em.learning_rate > 0.0 && em.learning_rate.is_finite()) {
            return Err(field("eval.embedder.learning_rate", "must be positive"));
        }
        range("eval.embedder.target_accuracy", em.target_accuracy, 0.0, 1.0)?;
        for (i, a) in e.ablation.iter().enumerate() {
            GuidanceSpec::new(a.mode, a.w).map_err(|err| field(&format!("eval.ablation[{i}].w"), err))?;
            if a.name.is_empty() {
                return Err(field(&format!("eval.ablation[{i}].name"), "is empty"));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn corpus(&self) -> CorpusSpec {
        let d = &self.data;
        CorpusSpec {
            master_seed: self.seed,
            identities: d.identities,
            held_out: d.held_out,
            frames: d.frames,
            pairs_per_identity: d.pairs_per_identity,
            res: d.res,
            reconstruction_mode: d.reconstruction_mode,
        }
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            steps: self.sample.steps,
            batch_size: self.eval.batch_size,
            seed: mix(self.seed, SAMPLE_SALT),
        }
    }

    /// Seed of the evaluation request set.
    pub fn request_seed(&self) -> u64 {
        mix(self.seed, REQUEST_SALT)
    }

    pub fn embedder_seed(&self) -> u64 {
        mix(self.seed, EMBEDDER_SALT)
    }
}

const SAMPLE_SALT: u64 = 0x5341_4d50;
const REQUEST_SALT: u64 = 0x5245_5155;
const EMBEDDER_SALT: u64 = 0x454d_4245;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = RunConfig::from_json(r#"{"data": {"identites": 3}}"#).unwrap_err();
        assert!(matches!(e, Error::Config(m) if m.contains("identites")));
    }

    #[test]
    fn messages_name_the_field() {
        let e = RunConfig::from_json(r#"{"data": {"frames": 1}}"#).unwrap_err();
        assert!(e.to_string().contains("data.frames"), "{e}");
        let e = RunConfig::from_json(r#"{"data": {"res": 32}}"#).unwrap_err();
        assert!(e.to_string().contains("model.net.res"), "{e}");
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
