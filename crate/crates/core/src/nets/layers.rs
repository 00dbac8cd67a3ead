//! Convolution, linear, normalisation and residual building blocks.

use candle_core::{Tensor, D};

use super::params::{Init, ParamStore, INIT_STD};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Tensor,
    b: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_init(ps, name, c_in, c_out, kernel, stride, Init::TruncNormal(INIT_STD), true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let w = ps.make(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], init)?;
        let b = if bias {
            Some(ps.make(&format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Conv2d {
            w,
            b,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.w.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.pad, self.stride, 1, 1)?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, Init::TruncNormal(INIT_STD), bias)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let w = ps.make(&format!("{name}.weight"), &[d_out, d_in], init)?;
        let b = if bias {
            Some(ps.make(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.w.t()?)?;
        Ok(match &self.b {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

pub const NORM_EPS: f64 = 1e-5;

/// Largest group count not above `max` that divides `channels`.
pub fn group_count(channels: usize, max: usize) -> usize {
    (1..=max.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, max_groups: usize) -> Result<Self> {
        Ok(GroupNorm {
            groups: group_count(channels, max_groups),
            gamma: ps.make(&format!("{name}.weight"), &[channels], Init::Ones)?,
            beta: ps.make(&format!("{name}.bias"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = self.groups;
        let xg = x.reshape((b, g, (c / g) * h * w))?;
        let mean = xg.mean_keepdim(2)?;
        let xc = xg.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(2)?;
        let xn = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(xn
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// GroupNorm → SiLU → conv → (+ timestep) → GroupNorm → SiLU → conv, plus a
/// 1×1 skip projection when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
        max_groups: usize,
    ) -> Result<Self> {
        Ok(ResBlock {
            norm1: GroupNorm::new(ps, &format!("{name}.norm1"), c_in, max_groups)?,
            conv1: Conv2d::new(ps, &format!("{name}.conv1"), c_in, c_out, 3, 1)?,
            temb: Linear::new(ps, &format!("{name}.temb"), temb_dim, c_out, true)?,
            norm2: GroupNorm::new(ps, &format!("{name}.norm2"), c_out, max_groups)?,
            conv2: Conv2d::new(ps, &format!("{name}.conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in != c_out {
                Some(Conv2d::new(ps, &format!("{name}.skip"), c_in, c_out, 1, 1)?)
            } else {
                None
            },
        })
    }

    /// `temb` is `(B, temb_dim)`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Sinusoidal embedding of integer timesteps: `[sin(t ω_i), cos(t ω_i)]`
/// with `ω_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(ts: &[u32], dim: usize, like: &Tensor) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::shape(format!("timestep embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let mut v = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|w| t as f64 * w).collect();
        v.extend(args.iter().map(|a| a.sin()));
        v.extend(args.iter().map(|a| a.cos()));
    }
    Ok(Tensor::from_vec(v, (ts.len(), dim), like.device())?.to_dtype(like.dtype())?)
}

/// `(B, C, H, W)` → `(B, H·W, C)`.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// `(B, H·W, C)` → `(B, C, H, W)`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, l, c) = x.dims3()?;
    if l != h * w {
        return Err(Error::shape(format!("{l} tokens for a {h}x{w} map")));
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// Mean over the token axis, keeping it: `(B, L, C)` → `(B, 1, C)`.
pub fn mean_token(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim(D::Minus2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn group_norm_normalises_each_group() {
        let mut ps = ParamStore::new(0, DType::F64, &Device::Cpu);
        let gn = GroupNorm::new(&mut ps, "gn", 4, 2).unwrap();
        let x = Tensor::arange(0f64, 32.0, &Device::Cpu).unwrap().reshape((1, 4, 2, 4)).unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 16)).unwrap();
        let mean = y.mean(1).unwrap().to_vec1::<f64>().unwrap();
        let var = y.sqr().unwrap().mean(1).unwrap().to_vec1::<f64>().unwrap();
        for g in 0..2 {
            assert!(mean[g].abs() < 1e-12);
            assert!((var[g] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_count_divides() {
        assert_eq!(group_count(64, 32), 32);
        assert_eq!(group_count(24, 32), 24);
        assert_eq!(group_count(48, 32), 24);
        assert_eq!(group_count(9, 8), 3);
    }

    #[test]
    fn tokens_roundtrip() {
        let x = Tensor::arange(0f32, 24.0, &Device::Cpu).unwrap().reshape((1, 2, 3, 4)).unwrap();
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.dims(), &[1, 12, 2]);
        let back = from_tokens(&t, 3, 4).unwrap();
        assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn timestep_zero_is_sin0_cos1() {
        let like = Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap();
        let e = timestep_embedding(&[0], 8, &like).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(e[0], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
