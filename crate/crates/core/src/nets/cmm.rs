//! Control mixer module: one shared control encoder applied twice, each
//! control attending to the other at every pyramid level.

use candle_core::Tensor;

use super::attention::CrossAttn;
use super::layers::{to_tokens, Conv2d};
use super::params::ParamStore;
use crate::facegen::CONTROL_CHANNELS;
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct Level {
    conv_a: Conv2d,
    conv_b: Conv2d,
    cond: Conv2d,
    cross: CrossAttn,
}

#[derive(Debug, Clone)]
pub struct ControlMixer {
    levels: Vec<Level>,
    subset: Vec<usize>,
    res: usize,
}

/// Checks a channel subset: non-empty, strictly increasing, inside `0..9`.
pub fn check_subset(subset: &[usize]) -> Result<()> {
    let increasing = subset.windows(2).all(|w| w[0] < w[1]);
    if subset.is_empty() || !increasing || subset.iter().any(|c| *c >= CONTROL_CHANNELS) {
        return Err(Error::Config(format!(
            "CMM channel subset {subset:?} must be a non-empty increasing subset of 0..{CONTROL_CHANNELS}"
        )));
    }
    Ok(())
}

impl ControlMixer {
    pub fn new(
        ps: &mut ParamStore,
        res: usize,
        widths: &[usize],
        subset: &[usize],
        max_groups: usize,
    ) -> Result<Self> {
        check_subset(subset)?;
        let mut levels = Vec::new();
        let mut c_in = subset.len();
        for (l, &c) in widths.iter().enumerate() {
            let name = format!("cmm.level{l}");
            levels.push(Level {
                conv_a: Conv2d::new(ps, &format!("{name}.conv_a"), c_in, c, 3, if l == 0 { 1 } else { 2 })?,
                conv_b: Conv2d::new(ps, &format!("{name}.conv_b"), c, c, 3, 1)?,
                cond: Conv2d::new(ps, &format!("{name}.cond"), subset.len(), c, 3, 1)?,
                cross: CrossAttn::new(ps, &format!("{name}.cross"), c, c, max_groups)?,
            });
            c_in = c;
        }
        Ok(ControlMixer {
            levels,
            subset: subset.to_vec(),
            res,
        })
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    fn restrict(&self, d: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = d.dims4()?;
        if c != CONTROL_CHANNELS || h != self.res || w != self.res {
            return Err(Error::shape(format!(
                "CMM expects {CONTROL_CHANNELS}x{r}x{r}, got {c}x{h}x{w}",
                r = self.res
            )));
        }
        if self.subset.len() == CONTROL_CHANNELS {
            return Ok(d.clone());
        }
        let idx = Tensor::from_vec(
            self.subset.iter().map(|c| *c as u32).collect::<Vec<_>>(),
            self.subset.len(),
            d.device(),
        )?;
        Ok(d.index_select(&idx, 1)?)
    }

    /// The shared encoder: `input` attends to `condition` at every level.
    fn encode(&self, input: &Tensor, condition: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.restrict(input)?;
        let cond = self.restrict(condition)?;
        let mut out = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            h = level.conv_b.forward(&level.conv_a.forward(&h)?.silu()?)?;
            let pooled = if l == 0 { cond.clone() } else { cond.avg_pool2d(1 << l)? };
            let c = to_tokens(&level.cond.forward(&pooled)?.silu()?)?;
            h = level.cross.forward(&h, &c)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// `(E_T, E_R)`, one embedding per level. The two halves run the same
    /// computation with the arguments exchanged, so swapping the controls
    /// swaps the outputs exactly.
    pub fn forward(
        &self,
        d_tgt: &Tensor,
        d_ref: &Tensor,
        subset: &[usize],
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        if subset != self.subset.as_slice() {
            return Err(Error::contract(format!(
                "CMM built for channels {:?}, called with {subset:?}",
                self.subset
            )));
        }
        Ok((self.encode(d_tgt, d_ref)?, self.encode(d_ref, d_tgt)?))
    }
}
