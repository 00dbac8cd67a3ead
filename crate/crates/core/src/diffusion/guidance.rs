//! Guidance rules combining a conditional and a baseline noise prediction.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nets::{CondInputs, Conditioning, Keep, ModelState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    /// Null context tokens as the baseline.
    CfgContext,
    /// Null (zero) face-controller input as the baseline.
    CfgController,
    /// Zero control-mixer embeddings as the baseline.
    CfgCmm,
    /// The reference control in the controller and in the CMM target slot
    /// as the baseline.
    Rcg,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 5] = [
        GuidanceMode::None,
        GuidanceMode::CfgContext,
        GuidanceMode::CfgController,
        GuidanceMode::CfgCmm,
        GuidanceMode::Rcg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::CfgContext => "cfg_context",
            GuidanceMode::CfgController => "cfg_controller",
            GuidanceMode::CfgCmm => "cfg_cmm",
            GuidanceMode::Rcg => "rcg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub mode: GuidanceMode,
    pub w: f64,
}

impl GuidanceSpec {
    pub fn new(mode: GuidanceMode, w: f64) -> Result<Self> {
        if !(w >= 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("guidance scale {w} must be finite and >= 0")));
        }
        Ok(GuidanceSpec { mode, w })
    }

    /// Whether the rule needs a baseline pass at all.
    pub fn needs_baseline(&self) -> bool {
        self.mode != GuidanceMode::None && self.w != 1.0
    }
}

/// Inputs of one sampling request batch, all `(B, C, R, R)`.
#[derive(Debug, Clone, Copy)]
pub struct SampleInputs<'a> {
    pub z_ref: &'a Tensor,
    pub d_tgt: &'a Tensor,
    pub d_ref: Option<&'a Tensor>,
}

/// Conditional and (when needed) baseline conditioning, computed once and
/// reused at every step.
#[derive(Debug, Clone)]
pub struct PreparedGuidance {
    pub spec: GuidanceSpec,
    pub cond: Conditioning,
    pub baseline: Option<Conditioning>,
}

fn zeros_mask(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros(like.dim(0)?, like.dtype(), like.device())?)
}

pub fn prepare_guidance(
    model: &ModelState,
    spec: GuidanceSpec,
    inputs: SampleInputs<'_>,
) -> Result<PreparedGuidance> {
    let d_ref = match (inputs.d_ref, spec.mode) {
        (Some(d), _) => d.clone(),
        (None, GuidanceMode::Rcg) => {
            return Err(Error::contract("reference control guidance needs d_ref"));
        }
        // Only the control mixer reads d_ref outside RCG; the null control
        // stands in when it is absent.
        (None, _) => inputs.d_tgt.zeros_like()?,
    };
    let full = CondInputs {
        x_ref: inputs.z_ref,
        d_ref: &d_ref,
        controller: inputs.d_tgt,
        cmm_target: inputs.d_tgt,
    };
    let cond = model.condition(full, &Keep::default())?;
    let baseline = if spec.needs_baseline() {
        let b = inputs.z_ref;
        Some(match spec.mode {
            GuidanceMode::None => unreachable!("no baseline without guidance"),
            GuidanceMode::CfgContext => model.condition(
                full,
                &Keep {
                    context: Some(zeros_mask(b)?),
                    ..Keep::default()
                },
            )?,
            GuidanceMode::CfgController => model.condition(
                full,
                &Keep {
                    controller: Some(zeros_mask(b)?),
                    ..Keep::default()
                },
            )?,
            GuidanceMode::CfgCmm => model.condition(
                full,
                &Keep {
                    cmm: Some(zeros_mask(b)?),
                    ..Keep::default()
                },
            )?,
            GuidanceMode::Rcg => model.condition(
                CondInputs {
                    controller: &d_ref,
                    cmm_target: &d_ref,
                    ..full
                },
                &Keep::default(),
            )?,
        })
    } else {
        None
    };
    Ok(PreparedGuidance { spec, cond, baseline })
}

/// `base + w · (cond − base)`.
pub fn combine(cond: &Tensor, base: &Tensor, w: f64) -> Result<Tensor> {
    Ok((base + ((cond - base)? * w)?)?)
}

/// Guided prediction, and the guidance delta `cond − base` when a baseline
/// was evaluated. With `w = 1` or no guidance the conditional prediction is
/// returned unchanged.
pub fn guided_epsilon(
    model: &ModelState,
    prepared: &PreparedGuidance,
    z_t: &Tensor,
    ts: &[u32],
) -> Result<(Tensor, Option<Tensor>)> {
    let cond = model.denoise_forward(z_t, ts, &prepared.cond)?;
    match &prepared.baseline {
        None => Ok((cond, None)),
        Some(b) => {
            let base = model.denoise_forward(z_t, ts, b)?;
            let delta = (&cond - &base)?;
            Ok((combine(&cond, &base, prepared.spec.w)?, Some(delta)))
        }
    }
}
