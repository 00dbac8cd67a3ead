//! All learnable components and the model that ties them together.

pub mod attention;
pub mod checkpoint;
pub mod cmm;
pub mod context;
pub mod controller;
pub mod layers;
pub mod params;
pub mod unet;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use attention::{aug_attn, plain_attention, FaceKv, SiteEmbeds};
pub use params::{Init, ParamStore};
pub use unet::{site_shapes, Role, UNet};

use crate::diffusion::{Schedule, ScheduleConfig};
use crate::facegen::CONTROL_CHANNELS;
use crate::{Error, Result};
use cmm::ControlMixer;
use context::ContextEncoder;
use controller::FaceController;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub res: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Decoder levels (0 = full resolution) that carry attention sites.
    pub attention_levels: Vec<usize>,
    pub norm_groups: usize,
    pub context_dim: usize,
    pub cmm_channels: Vec<usize>,
    /// Control channels seen by the CMM.
    pub cmm_subset: Vec<usize>,
    pub use_facenet: bool,
    pub use_cmm: bool,
    /// Activation-free controller, for linearity tests only.
    pub linear_controller: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            res: 64,
            base_channels: 64,
            channel_mults: vec![1, 2, 2, 4],
            res_blocks: 2,
            attention_levels: vec![0, 1, 2, 3],
            norm_groups: 32,
            context_dim: 128,
            cmm_channels: vec![32, 64, 64, 128],
            cmm_subset: (0..CONTROL_CHANNELS).collect(),
            use_facenet: true,
            use_cmm: true,
            linear_controller: false,
        }
    }
}

impl NetConfig {
    /// A small variant for tests: 16×16, 8 base channels.
    pub fn tiny() -> Self {
        NetConfig {
            res: 16,
            base_channels: 8,
            channel_mults: vec![1, 2, 2, 2],
            res_blocks: 2,
            attention_levels: vec![0, 1, 2, 3],
            norm_groups: 4,
            context_dim: 16,
            cmm_channels: vec![8, 8, 8, 8],
            ..NetConfig::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let levels = self.levels();
        if levels == 0 {
            return bad("channel_mults is empty".into());
        }
        if self.res % (1 << (levels - 1)) != 0 {
            return bad(format!("resolution {} not divisible by 2^{}", self.res, levels - 1));
        }
        if self.base_channels == 0 || self.res_blocks == 0 || self.norm_groups == 0 {
            return bad("channel, block and group counts must be positive".into());
        }
        if self.base_channels % 2 != 0 {
            return bad("base_channels must be even".into());
        }
        if self.attention_levels.iter().any(|l| *l >= levels) {
            return bad(format!("attention level out of 0..{levels}"));
        }
        if self.use_cmm {
            if self.cmm_channels.len() != levels {
                return bad(format!("cmm_channels needs {levels} entries"));
            }
            cmm::check_subset(&self.cmm_subset)?;
        }
        crate::facegen::render::check_resolution(self.res).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
}

/// Conditioning computed once per (reference, control) pair and reused for
/// every denoising step.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub context: Tensor,
    pub first_layer: Tensor,
    pub face: Option<Vec<FaceKv>>,
    pub embeds: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

/// Per-sample 0/1 masks; `None` keeps every sample's input.
#[derive(Debug, Clone, Default)]
pub struct Keep {
    pub context: Option<Tensor>,
    pub controller: Option<Tensor>,
    pub cmm: Option<Tensor>,
}

/// What each conditioning pathway receives. All images are `(B, C, R, R)`.
#[derive(Debug, Clone, Copy)]
pub struct CondInputs<'a> {
    pub x_ref: &'a Tensor,
    pub d_ref: &'a Tensor,
    /// Face-controller input.
    pub controller: &'a Tensor,
    /// CMM target slot.
    pub cmm_target: &'a Tensor,
}

/// Every learnable component plus the noise schedule.
#[derive(Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub schedule: Schedule,
    pub denoiser: UNet,
    pub facenet: Option<UNet>,
    pub controller: FaceController,
    pub cmm: Option<ControlMixer>,
    pub context: ContextEncoder,
}

fn masked(x: &Tensor, keep: Option<&Tensor>) -> Result<Tensor> {
    match keep {
        None => Ok(x.clone()),
        Some(m) => {
            let b = x.dim(0)?;
            let mut shape = vec![1usize; x.rank()];
            shape[0] = b;
            Ok(x.broadcast_mul(&m.to_dtype(x.dtype())?.reshape(shape)?)?)
        }
    }
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.net.validate()?;
        let schedule = Schedule::from_config(&config.schedule)?;
        let net = &config.net;
        let mut ps = ParamStore::new(seed, dtype, device);
        let denoiser = UNet::new(&mut ps, "denoiser", net, Role::Denoiser)?;
        let facenet = if net.use_facenet {
            Some(UNet::new(&mut ps, "facenet", net, Role::FaceNet)?)
        } else {
            None
        };
        let controller = FaceController::new(&mut ps, net.base_channels, net.linear_controller)?;
        let cmm = if net.use_cmm {
            Some(ControlMixer::new(&mut ps, net.res, &net.cmm_channels, &net.cmm_subset, net.norm_groups)?)
        } else {
            None
        };
        let context = ContextEncoder::new(&mut ps, net.res, net.context_dim)?;
        Ok(ModelState {
            config,
            params: ps,
            schedule,
            denoiser,
            facenet,
            controller,
            cmm,
            context,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn res(&self) -> usize {
        self.config.net.res
    }

    pub fn context_encode(&self, x_ref: &Tensor) -> Result<Tensor> {
        self.context.forward(x_ref)
    }

    /// Reference-branch keys/values at every site, from the clean reference
    /// at timestep 0.
    pub fn facenet_extract(&self, x_ref: &Tensor, context: &Tensor) -> Result<Vec<FaceKv>> {
        let f = self
            .facenet
            .as_ref()
            .ok_or_else(|| Error::contract("model has no reference branch"))?;
        let b = x_ref.dim(0)?;
        Ok(f.forward(x_ref, &vec![0; b], context, None, None, None)?.1)
    }

    pub fn face_controller_encode(&self, d: &Tensor) -> Result<Tensor> {
        self.controller.forward(d)
    }

    pub fn cmm_forward(
        &self,
        d_tgt: &Tensor,
        d_ref: &Tensor,
        subset: &[usize],
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        self.cmm
            .as_ref()
            .ok_or_else(|| Error::contract("model has no control mixer"))?
            .forward(d_tgt, d_ref, subset)
    }

    /// Builds every conditioning signal, applying the dropout masks.
    pub fn condition(&self, inputs: CondInputs<'_>, keep: &Keep) -> Result<Conditioning> {
        let context = masked(&self.context_encode(inputs.x_ref)?, keep.context.as_ref())?;
        let ctrl_in = masked(inputs.controller, keep.controller.as_ref())?;
        let first_layer = self.face_controller_encode(&ctrl_in)?;
        let face = match self.facenet {
            Some(_) => Some(self.facenet_extract(inputs.x_ref, &context)?),
            None => None,
        };
        let embeds = match &self.cmm {
            Some(c) => {
                let (et, er) = c.forward(inputs.cmm_target, inputs.d_ref, &self.config.net.cmm_subset)?;
                let k = keep.cmm.as_ref();
                Some((
                    et.iter().map(|e| masked(e, k)).collect::<Result<Vec<_>>>()?,
                    er.iter().map(|e| masked(e, k)).collect::<Result<Vec<_>>>()?,
                ))
            }
            None => None,
        };
        Ok(Conditioning {
            context,
            first_layer,
            face,
            embeds,
        })
    }

    /// Predicted noise for `z_t` at timesteps `ts`.
    pub fn denoise_forward(&self, z_t: &Tensor, ts: &[u32], cond: &Conditioning) -> Result<Tensor> {
        if self.facenet.is_some() && cond.face.is_none() {
            return Err(Error::contract("model uses a reference branch but no face features were given"));
        }
        let embeds = cond.embeds.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
        let (out, _) = self.denoiser.forward(
            z_t,
            ts,
            &cond.context,
            Some(&cond.first_layer),
            cond.face.as_deref(),
            embeds,
        )?;
        out.ok_or_else(|| Error::contract("denoiser produced no output"))
    }

    /// Trainable scalar counts per component.
    pub fn parameter_counts(&self) -> Vec<(&'static str, usize)> {
        ["denoiser", "facenet", "controller", "cmm", "context"]
            .into_iter()
            .map(|p| (p, self.params.count_prefix(&format!("{p}."))))
            .collect()
    }
}
