//! Global context encoder: the stand-in for an image-embedding model.

use candle_core::Tensor;

use super::layers::{mean_token, to_tokens, Conv2d};
use super::params::{Init, ParamStore, INIT_STD};
use crate::{Error, Result};

/// Grid tokens (4×4) plus one pooled token.
pub const CONTEXT_TOKENS: usize = 17;
const GRID: usize = 4;
const WIDTH_BASE: usize = 32;

/// Strided conv pyramid down to a 4×4 grid, a 1×1 projection to the token
/// width, and a learned position embedding per token.
#[derive(Debug, Clone)]
pub struct ContextEncoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    proj: Conv2d,
    pos: Tensor,
    res: usize,
}

impl ContextEncoder {
    pub fn new(ps: &mut ParamStore, res: usize, dim: usize) -> Result<Self> {
        if res < GRID || !(res / GRID).is_power_of_two() || res % GRID != 0 {
            return Err(Error::Config(format!("context encoder cannot reduce {res} to {GRID}")));
        }
        let n_down = (res / GRID).trailing_zeros() as usize;
        let width = |i: usize| (WIDTH_BASE << i).min(dim.max(WIDTH_BASE));
        let stem = Conv2d::new(ps, "context.stem", 3, width(0), 3, 1)?;
        let downs = (0..n_down)
            .map(|i| Conv2d::new(ps, &format!("context.down{i}"), width(i), width(i + 1), 3, 2))
            .collect::<Result<Vec<_>>>()?;
        let proj = Conv2d::new(ps, "context.proj", width(n_down), dim, 1, 1)?;
        let pos = ps.make("context.pos", &[1, CONTEXT_TOKENS, dim], Init::TruncNormal(INIT_STD))?;
        Ok(ContextEncoder {
            stem,
            downs,
            proj,
            pos,
            res,
        })
    }

    /// `(B, 3, R, R)` → `(B, 17, dim)`; the pooled token comes first.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != self.res || w != self.res {
            return Err(Error::shape(format!(
                "context encoder expects 3x{r}x{r}, got {c}x{h}x{w}",
                r = self.res
            )));
        }
        let mut h = self.stem.forward(x)?.silu()?;
        for d in &self.downs {
            h = d.forward(&h)?.silu()?;
        }
        let grid = to_tokens(&self.proj.forward(&h)?)?;
        let tokens = Tensor::cat(&[&mean_token(&grid)?, &grid], 1)?;
        Ok(tokens.broadcast_add(&self.pos)?)
    }
}
