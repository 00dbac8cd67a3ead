#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use controlface::nets::{ModelConfig, ModelState, NetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CPU: Device = Device::Cpu;

pub fn tiny_model(dtype: DType) -> ModelState {
    let cfg = ModelConfig {
        net: NetConfig::tiny(),
        ..ModelConfig::default()
    };
    ModelState::new(cfg, 1, dtype, &CPU).unwrap()
}

/// Uniform `[0, 1)` values of shape `(b, c, res, res)`.
pub fn random_images(seed: u64, b: usize, c: usize, res: usize, dtype: DType) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..b * c * res * res).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::from_vec(v, (b, c, res, res), &CPU).unwrap().to_dtype(dtype).unwrap()
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    to_vec(a).iter().zip(to_vec(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Every parameter to a random non-zero value, so no gradient or guidance
/// delta is structurally zero.
pub fn randomise(model: &ModelState, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, var) in model.params.iter() {
        let n = var.elem_count();
        let base = if name.ends_with("norm1.weight") || name.ends_with("norm2.weight") || name.ends_with("norm.weight") {
            1.0
        } else {
            0.0
        };
        let v: Vec<f64> = (0..n).map(|_| base + rng.random_range(-0.3..0.3)).collect();
        let t = Tensor::from_vec(v, var.dims(), &CPU).unwrap().to_dtype(model.dtype()).unwrap();
        model.params.assign(name, &t).unwrap();
    }
}

/// Central-difference check of `objective` against its autograd gradient on
/// `count` randomly chosen parameter scalars.
pub fn check_gradients(model: &ModelState, objective: impl Fn() -> Tensor, count: usize, seed: u64) -> Vec<(String, f64)> {
    let grads = objective().backward().unwrap();
    let names: Vec<(String, usize)> = model.params.iter().map(|(n, v)| (n.clone(), v.elem_count())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut out = Vec::new();
    while out.len() < count {
        let (name, n) = &names[rng.random_range(0..names.len())];
        let idx = rng.random_range(0..*n);
        let var = model.params.get(name).unwrap();
        let analytic = to_vec(grads.get(var.as_tensor()).unwrap())[idx];
        let original = to_vec(var.as_tensor());
        let shape = var.dims().to_vec();
        let eval_at = |delta: f64| {
            let mut v = original.clone();
            v[idx] += delta;
            model.params.assign(name, &Tensor::from_vec(v, shape.as_slice(), &CPU).unwrap()).unwrap();
            objective().to_scalar::<f64>().unwrap()
        };
        let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        model.params.assign(name, &Tensor::from_vec(original, shape.as_slice(), &CPU).unwrap()).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        assert!(rel < 1e-3, "{name}[{idx}]: analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}");
        out.push((format!("{name}[{idx}]"), rel));
    }
    out
}
