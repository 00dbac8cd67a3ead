//! Face controller: a shallow CNN whose output is summed into the
//! denoiser's first feature map.

use candle_core::Tensor;

use super::layers::Conv2d;
use super::params::{Init, ParamStore};
use crate::facegen::CONTROL_CHANNELS;
use crate::{Error, Result};

pub const CONTROLLER_WIDTHS: [usize; 3] = [32, 64, 64];

#[derive(Debug, Clone)]
pub struct FaceController {
    convs: Vec<Conv2d>,
    /// Drops the activations; only for tests of linearity.
    linear: bool,
}

impl FaceController {
    pub fn new(ps: &mut ParamStore, out_channels: usize, linear: bool) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = CONTROL_CHANNELS;
        for (i, &c) in CONTROLLER_WIDTHS.iter().enumerate() {
            convs.push(Conv2d::new(ps, &format!("controller.conv{i}"), c_in, c, 3, 1)?);
            c_in = c;
        }
        // Zero and bias-free, so the controller starts as a no-op.
        convs.push(Conv2d::with_init(
            ps,
            "controller.out",
            c_in,
            out_channels,
            3,
            1,
            Init::Zeros,
            false,
        )?);
        Ok(FaceController { convs, linear })
    }

    /// `(B, 9, R, R)` → `(B, C₀, R, R)`.
    pub fn forward(&self, d: &Tensor) -> Result<Tensor> {
        let c = d.dim(1)?;
        if c != CONTROL_CHANNELS {
            return Err(Error::shape(format!(
                "face controller expects {CONTROL_CHANNELS} channels, got {c}"
            )));
        }
        let last = self.convs.len() - 1;
        let mut h = d.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i < last && !self.linear {
                h = h.silu()?;
            }
        }
        Ok(h)
    }
}
