//! Plain and augmented attention, and the attention blocks built on them.
//!
//! All attention here is single-head over `(B, l, d)` tensors.

use candle_core::{Tensor, D};

use super::layers::{from_tokens, to_tokens, GroupNorm, Linear};
use super::params::{Init, ParamStore};
use crate::{Error, Result};

/// Row softmax over the last axis. The subtracted row maximum is detached:
/// it cancels analytically, so it carries no gradient.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `Softmax(Q Kᵀ / √d) V`, using the library softmax.
pub fn plain_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let d = q.dim(D::Minus1)?;
    let logits = (q.matmul(&k.t()?)? / (d as f64).sqrt())?;
    Ok(candle_nn::ops::softmax(&logits, D::Minus1)?.matmul(v)?)
}

/// Key/value pair cached from the reference branch at one attention site.
#[derive(Debug, Clone)]
pub struct FaceKv {
    pub k: Tensor,
    pub v: Tensor,
}

/// Control-mixer embeddings projected to one site's attention dimension.
#[derive(Debug, Clone)]
pub struct SiteEmbeds {
    pub e_t: Tensor,
    pub e_r: Tensor,
}

fn check_same(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Augmented self-attention over `(B, l, d)` tensors:
///
/// `Softmax((Q + E_T) [K + E_T, K_face + E_R]ᵀ / √d) [V, V_face]`
///
/// Without `face` the keys and values are the branch's own; without
/// `embeds` nothing is added.
pub fn aug_attn(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    face: Option<&FaceKv>,
    embeds: Option<&SiteEmbeds>,
) -> Result<Tensor> {
    check_same("Q/K", q, k)?;
    check_same("Q/V", q, v)?;
    let (mut q, mut k) = (q.clone(), k.clone());
    if let Some(e) = embeds {
        check_same("E_T", &q, &e.e_t)?;
        check_same("E_R", &q, &e.e_r)?;
        q = (q + &e.e_t)?;
        k = (k + &e.e_t)?;
    }
    let (keys, values) = match face {
        Some(f) => {
            check_same("K_face", &k, &f.k)?;
            check_same("V_face", v, &f.v)?;
            let kf = match embeds {
                Some(e) => (&f.k + &e.e_r)?,
                None => f.k.clone(),
            };
            (Tensor::cat(&[&k, &kf], 1)?, Tensor::cat(&[v, &f.v], 1)?)
        }
        None => (k, v.clone()),
    };
    let d = q.dim(D::Minus1)?;
    let logits = (q.matmul(&keys.t()?)? / (d as f64).sqrt())?;
    Ok(softmax_rows(&logits)?.matmul(&values)?)
}

/// Self-attention site: GroupNorm, Q/K/V projections, augmented attention
/// and an output projection added back to the input map. The denoiser's
/// sites also own the zero-initialised projection of the control-mixer
/// embedding into the attention dimension.
#[derive(Debug, Clone)]
pub struct SelfAttnSite {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    e_proj: Option<Linear>,
    pub dim: usize,
}

impl SelfAttnSite {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        max_groups: usize,
        embed_channels: Option<usize>,
    ) -> Result<Self> {
        Ok(SelfAttnSite {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels, max_groups)?,
            q: Linear::new(ps, &format!("{name}.q"), channels, channels, false)?,
            k: Linear::new(ps, &format!("{name}.k"), channels, channels, false)?,
            v: Linear::new(ps, &format!("{name}.v"), channels, channels, false)?,
            out: Linear::new(ps, &format!("{name}.out"), channels, channels, true)?,
            e_proj: match embed_channels {
                Some(c) => Some(Linear::with_init(
                    ps,
                    &format!("{name}.e_proj"),
                    c,
                    channels,
                    Init::Zeros,
                    false,
                )?),
                None => None,
            },
            dim: channels,
        })
    }

    /// Projected keys and values of `x`, as cached by the reference branch.
    pub fn key_values(&self, x: &Tensor) -> Result<FaceKv> {
        let t = to_tokens(&self.norm.forward(x)?)?;
        Ok(FaceKv {
            k: self.k.forward(&t)?,
            v: self.v.forward(&t)?,
        })
    }

    /// Projects level embeddings `(B, C_e, H, W)` to `(B, l, d)`.
    pub fn project_embeds(&self, e_t: &Tensor, e_r: &Tensor) -> Result<SiteEmbeds> {
        let p = self
            .e_proj
            .as_ref()
            .ok_or_else(|| Error::contract("site has no embedding projection"))?;
        Ok(SiteEmbeds {
            e_t: p.forward(&to_tokens(e_t)?)?,
            e_r: p.forward(&to_tokens(e_r)?)?,
        })
    }

    /// Returns the updated map and this site's own keys/values.
    pub fn forward(
        &self,
        x: &Tensor,
        face: Option<&FaceKv>,
        embeds: Option<(&Tensor, &Tensor)>,
    ) -> Result<(Tensor, FaceKv)> {
        let (_, _, h, w) = x.dims4()?;
        let t = to_tokens(&self.norm.forward(x)?)?;
        let q = self.q.forward(&t)?;
        let own = FaceKv {
            k: self.k.forward(&t)?,
            v: self.v.forward(&t)?,
        };
        let e = match embeds {
            Some((et, er)) => Some(self.project_embeds(et, er)?),
            None => None,
        };
        let a = aug_attn(&q, &own.k, &own.v, face, e.as_ref())?;
        let y = from_tokens(&self.out.forward(&a)?, h, w)?;
        Ok(((x + y)?, own))
    }
}

/// Cross-attention from a feature map to a token sequence.
#[derive(Debug, Clone)]
pub struct CrossAttn {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttn {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        token_dim: usize,
        max_groups: usize,
    ) -> Result<Self> {
        Ok(CrossAttn {
            norm: GroupNorm::new(ps, &format!("{name}.norm"), channels, max_groups)?,
            q: Linear::new(ps, &format!("{name}.q"), channels, channels, false)?,
            k: Linear::new(ps, &format!("{name}.k"), token_dim, channels, false)?,
            v: Linear::new(ps, &format!("{name}.v"), token_dim, channels, false)?,
            out: Linear::new(ps, &format!("{name}.out"), channels, channels, true)?,
        })
    }

    /// `x` is `(B, C, H, W)`, `tokens` is `(B, g, token_dim)`.
    pub fn forward(&self, x: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let t = to_tokens(&self.norm.forward(x)?)?;
        let a = plain_attention(
            &self.q.forward(&t)?,
            &self.k.forward(tokens)?,
            &self.v.forward(tokens)?,
        )?;
        Ok((x + from_tokens(&self.out.forward(&a)?, h, w)?)?)
    }
}
