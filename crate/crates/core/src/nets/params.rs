//! Named, deterministically initialised parameters.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

use crate::rng::{substream, Stream};
use crate::{Error, Result};

/// Standard deviation of the default weight initialisation.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Every trainable array of a model, keyed by a dotted path.
///
/// Initial values depend only on the seed and the name, never on creation
/// order, so adding a component does not perturb the others.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            seed,
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates a parameter and returns a tensor sharing its storage.
    pub fn make(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::contract(format!("parameter {name} created twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let mut rng = substream(self.seed, Stream::Init, name_hash(name));
                (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break z * std;
                        }
                    })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn count_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites a parameter in place; shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(format!(
                "{name}: stored {:?}, given {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// True when every parameter is finite.
    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if s.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_on_name_not_order() {
        let mut a = ParamStore::new(3, DType::F32, &Device::Cpu);
        let mut b = ParamStore::new(3, DType::F32, &Device::Cpu);
        let x = a.make("x", &[4, 4], Init::TruncNormal(0.02)).unwrap();
        a.make("y", &[2], Init::Zeros).unwrap();
        b.make("y", &[2], Init::Zeros).unwrap();
        let x2 = b.make("x", &[4, 4], Init::TruncNormal(0.02)).unwrap();
        let v1 = x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let v2 = x2.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v1, v2);
        assert!(v1.iter().all(|v| v.abs() <= 0.04));
        assert!(a.make("x", &[1], Init::Ones).is_err());
    }
}
