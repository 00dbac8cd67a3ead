//! The U-Net shared by the denoiser and the reference branch.
//!
//! Encoder: a stem conv, then per level `res_blocks` residual blocks (each
//! output kept as a skip) and a stride-2 downsample between levels. Middle:
//! two residual blocks. Decoder: per level, coarsest first, `res_blocks`
//! residual blocks each consuming one skip and each followed by an
//! attention site (self-attention, then cross-attention to the context
//! tokens) on levels listed in `attention_levels`; nearest upsampling and a
//! conv between levels.

use candle_core::Tensor;

use super::attention::{CrossAttn, FaceKv, SelfAttnSite};
use super::layers::{timestep_embedding, Conv2d, GroupNorm, Linear, ResBlock};
use super::params::ParamStore;
use super::NetConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Denoiser,
    /// Reference branch: runs up to its last attention site and reports the
    /// keys/values there.
    FaceNet,
}

#[derive(Debug, Clone)]
struct Site {
    attn: SelfAttnSite,
    cross: CrossAttn,
    level: usize,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    res: ResBlock,
    site: Option<Site>,
}

#[derive(Debug, Clone)]
pub struct UNet {
    role: Role,
    base: usize,
    stem: Conv2d,
    temb1: Linear,
    temb2: Linear,
    down_blocks: Vec<Vec<ResBlock>>,
    downsamples: Vec<Conv2d>,
    mid: Vec<ResBlock>,
    up_blocks: Vec<Vec<DecoderBlock>>,
    upsamples: Vec<Conv2d>,
    out_norm: Option<GroupNorm>,
    out_conv: Option<Conv2d>,
    res: usize,
}

/// `(level, l, d)` of every attention site, in evaluation order.
pub fn site_shapes(cfg: &NetConfig) -> Vec<(usize, usize, usize)> {
    let levels = cfg.channel_mults.len();
    let mut out = Vec::new();
    for level in (0..levels).rev() {
        if cfg.attention_levels.contains(&level) {
            let side = cfg.res >> level;
            for _ in 0..cfg.res_blocks {
                out.push((level, side * side, cfg.base_channels * cfg.channel_mults[level]));
            }
        }
    }
    out
}

impl UNet {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &NetConfig, role: Role) -> Result<Self> {
        let levels = cfg.channel_mults.len();
        let ch: Vec<usize> = cfg.channel_mults.iter().map(|m| m * cfg.base_channels).collect();
        let g = cfg.norm_groups;
        let temb_dim = 4 * cfg.base_channels;
        let stem = Conv2d::new(ps, &format!("{name}.stem"), 3, ch[0], 3, 1)?;
        let temb1 = Linear::new(ps, &format!("{name}.temb1"), cfg.base_channels, temb_dim, true)?;
        let temb2 = Linear::new(ps, &format!("{name}.temb2"), temb_dim, temb_dim, true)?;

        let mut down_blocks = Vec::new();
        let mut downsamples = Vec::new();
        let mut c = ch[0];
        for l in 0..levels {
            let mut blocks = Vec::new();
            for i in 0..cfg.res_blocks {
                blocks.push(ResBlock::new(ps, &format!("{name}.down{l}.res{i}"), c, ch[l], temb_dim, g)?);
                c = ch[l];
            }
            down_blocks.push(blocks);
            if l + 1 < levels {
                downsamples.push(Conv2d::new(ps, &format!("{name}.down{l}.downsample"), c, c, 3, 2)?);
            }
        }
        let mid = (0..2)
            .map(|i| ResBlock::new(ps, &format!("{name}.mid.res{i}"), c, c, temb_dim, g))
            .collect::<Result<Vec<_>>>()?;

        let embed_channels = |l: usize| match role {
            Role::Denoiser if cfg.use_cmm => Some(cfg.cmm_channels[l]),
            _ => None,
        };
        let mut up_blocks = Vec::new();
        let mut upsamples = Vec::new();
        for l in (0..levels).rev() {
            let mut blocks = Vec::new();
            for i in 0..cfg.res_blocks {
                let n = format!("{name}.up{l}.res{i}");
                let res = ResBlock::new(ps, &n, c + ch[l], ch[l], temb_dim, g)?;
                c = ch[l];
                let site = if cfg.attention_levels.contains(&l) {
                    Some(Site {
                        attn: SelfAttnSite::new(ps, &format!("{name}.up{l}.attn{i}"), c, g, embed_channels(l))?,
                        cross: CrossAttn::new(ps, &format!("{name}.up{l}.cross{i}"), c, cfg.context_dim, g)?,
                        level: l,
                    })
                } else {
                    None
                };
                blocks.push(DecoderBlock { res, site });
            }
            up_blocks.push(blocks);
            if l > 0 {
                upsamples.push(Conv2d::new(ps, &format!("{name}.up{l}.upsample"), c, c, 3, 1)?);
            }
        }
        let (out_norm, out_conv) = match role {
            Role::Denoiser => (
                Some(GroupNorm::new(ps, &format!("{name}.out_norm"), c, g)?),
                Some(Conv2d::new(ps, &format!("{name}.out"), c, 3, 3, 1)?),
            ),
            Role::FaceNet => (None, None),
        };
        Ok(UNet {
            role,
            base: cfg.base_channels,
            stem,
            temb1,
            temb2,
            down_blocks,
            downsamples,
            mid,
            up_blocks,
            upsamples,
            out_norm,
            out_conv,
            res: cfg.res,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn site_count(&self) -> usize {
        self.up_blocks.iter().flatten().filter(|b| b.site.is_some()).count()
    }

    /// Runs the network.
    ///
    /// * `x`: `(B, 3, R, R)`; `ts`: one timestep per sample.
    /// * `context`: `(B, 17, d_ctx)` tokens.
    /// * `first_layer`: added to the stem output (the controller features).
    /// * `face`: one cached key/value pair per site.
    /// * `embeds`: per-level `(E_T, E_R)` maps.
    ///
    /// Returns the output map (denoiser only) and the keys/values computed
    /// at every site.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        x: &Tensor,
        ts: &[u32],
        context: &Tensor,
        first_layer: Option<&Tensor>,
        face: Option<&[FaceKv]>,
        embeds: Option<(&[Tensor], &[Tensor])>,
    ) -> Result<(Option<Tensor>, Vec<FaceKv>)> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 || h != self.res || w != self.res {
            return Err(Error::shape(format!(
                "U-Net expects 3x{r}x{r}, got {c}x{h}x{w}",
                r = self.res
            )));
        }
        if ts.len() != b {
            return Err(Error::shape(format!("{} timesteps for batch {b}", ts.len())));
        }
        if let Some(f) = face {
            if f.len() != self.site_count() {
                return Err(Error::contract(format!(
                    "{} face feature pairs for {} sites",
                    f.len(),
                    self.site_count()
                )));
            }
        }
        let temb = timestep_embedding(ts, self.base, x)?;
        let temb = self.temb2.forward(&self.temb1.forward(&temb)?.silu()?)?;

        let mut hcur = self.stem.forward(x)?;
        if let Some(f) = first_layer {
            hcur = (hcur + f)?;
        }
        let mut skips = Vec::new();
        for (l, blocks) in self.down_blocks.iter().enumerate() {
            for block in blocks {
                hcur = block.forward(&hcur, &temb)?;
                skips.push(hcur.clone());
            }
            if let Some(d) = self.downsamples.get(l) {
                hcur = d.forward(&hcur)?;
            }
        }
        for block in &self.mid {
            hcur = block.forward(&hcur, &temb)?;
        }

        let mut kv = Vec::with_capacity(self.site_count());
        let total_sites = self.site_count();
        for (i, blocks) in self.up_blocks.iter().enumerate() {
            for block in blocks {
                let skip = skips.pop().expect("one skip per decoder block");
                hcur = block.res.forward(&Tensor::cat(&[&hcur, &skip], 1)?, &temb)?;
                if let Some(site) = &block.site {
                    let s = kv.len();
                    let level_embeds = embeds.map(|(et, er)| (&et[site.level], &er[site.level]));
                    let (next, own) = site.attn.forward(&hcur, face.map(|f| &f[s]), level_embeds)?;
                    kv.push(own);
                    if self.role == Role::FaceNet && kv.len() == total_sites {
                        return Ok((None, kv));
                    }
                    hcur = site.cross.forward(&next, context)?;
                }
            }
            if let Some(up) = self.upsamples.get(i) {
                let (_, _, hh, ww) = hcur.dims4()?;
                hcur = up.forward(&hcur.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        match (&self.out_norm, &self.out_conv) {
            (Some(n), Some(o)) => Ok((Some(o.forward(&n.forward(&hcur)?.silu()?)?), kv)),
            _ => Ok((None, kv)),
        }
    }
}
