use candle_core::{DType, Device, Tensor};

use crate::dataset::Quadruplet;
use crate::raster::Raster;
use crate::Result;

/// Images enter the networks as `z = 2x − 1`; control maps stay in `[0, 1]`.
pub fn image_to_latent(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}

pub fn latent_to_image(z: &Tensor) -> Result<Tensor> {
    Ok(z.affine(0.5, 0.5)?)
}

/// A stack of quadruplets as `(B, C, R, R)` tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub z_ref: Tensor,
    pub z_tgt: Tensor,
    pub d_ref: Tensor,
    pub d_tgt: Tensor,
}

impl Batch {
    pub fn from_quadruplets(items: &[&Quadruplet], dtype: DType, device: &Device) -> Result<Self> {
        let stack = |f: &dyn Fn(&Quadruplet) -> &Raster| {
            let v: Vec<&Raster> = items.iter().map(|q| f(q)).collect();
            Raster::batch_tensor(&v, dtype, device)
        };
        Ok(Batch {
            z_ref: image_to_latent(&stack(&|q| &q.x_ref)?)?,
            z_tgt: image_to_latent(&stack(&|q| &q.x_tgt)?)?,
            d_ref: stack(&|q| &q.d_ref.data)?,
            d_tgt: stack(&|q| &q.d_tgt.data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.z_tgt.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
