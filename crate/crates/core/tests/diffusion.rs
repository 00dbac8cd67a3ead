use candle_core::{DType, Tensor};
use controlface::diffusion::{
    ddim_sample, guided_epsilon, initial_noise, make_schedule, prepare_guidance, training_loss, training_loss_with,
    Batch, Dropout, GuidanceMode, GuidanceSpec, SampleInputs, Schedule, ScheduleConfig, TrajectoryRecord,
};
use controlface::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

mod common;
use common::*;

fn default_schedule() -> Schedule {
    Schedule::from_config(&ScheduleConfig::default()).unwrap()
}

#[test]
fn terminal_alpha_bar_matches_direct_product() {
    let s = default_schedule();
    let mut prod = 1.0f64;
    for i in 0..1000 {
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0);
    }
    let ab = s.alpha_bar(1000).unwrap();
    assert!((ab - prod).abs() <= 1e-15 * prod.max(1e-300) + 1e-18, "{ab} vs {prod}");
    assert!(ab < 1e-4);
    assert!(s.alphas_bar.windows(2).all(|w| w[1] < w[0]));
    assert!(s.betas.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(make_schedule(10, 1e-4, 0.02).unwrap().alphas_bar.len(), 10);
    assert!(s.alpha_bar(0).is_err());
}

#[test]
fn forward_process_variance() {
    let s = default_schedule();
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [1u32, 50, 500, 1000] {
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps = Tensor::from_vec(eps, (1, n), &CPU).unwrap();
        let z = eps.zeros_like().unwrap();
        let zt = to_vec(&s.forward_diffuse(&z, &[t], &eps).unwrap());
        let mean = zt.iter().sum::<f64>() / n as f64;
        let var = zt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let m4 = zt.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n as f64;
        let se = ((m4 - var * var) / n as f64).sqrt();
        let want = 1.0 - s.alpha_bar(t).unwrap();
        assert!((var - want).abs() <= 3.0 * se, "t={t}: {var} vs {want} (se {se})");
    }
}

#[test]
fn forward_process_limits() {
    let s = default_schedule();
    let z = random_images(1, 1, 3, 8, DType::F64);
    let zero = z.zeros_like().unwrap();
    let out = s.forward_diffuse(&z, &[300], &zero).unwrap();
    let scale = s.alpha_bar(300).unwrap().sqrt();
    assert_eq!(to_vec(&out), to_vec(&(&z * scale).unwrap()));
    let eps = random_images(2, 1, 3, 8, DType::F64);
    let bound = (1.0 - s.alpha_bar(1).unwrap()).sqrt() * to_vec(&eps).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_abs_diff(&s.forward_diffuse(&z, &[1], &eps).unwrap(), &z) <= bound + (1.0 - scale) + 1e-12);
    assert!(s.forward_diffuse(&z, &[1], &random_images(2, 1, 3, 4, DType::F64)).is_err());
    let x0 = s.predict_x0(&z, &zero, &[1000]).unwrap();
    assert!(to_vec(&x0).iter().all(|v| v.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn predict_x0_inverts_forward(seed in any::<u64>(), t in 1u32..=1000) {
        let s = default_schedule();
        let z = random_images(seed, 2, 3, 4, DType::F64).affine(2.0, -1.0).unwrap();
        let eps = random_images(seed ^ 1, 2, 3, 4, DType::F64).affine(6.0, -3.0).unwrap();
        let zt = s.forward_diffuse(&z, &[t, t], &eps).unwrap();
        prop_assert!(max_abs_diff(&s.predict_x0(&zt, &eps, &[t, t]).unwrap(), &z) < 1e-5);
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>()) {
        let a = random_images(seed, 2, 3, 4, DType::F64);
        let b = random_images(seed ^ 7, 2, 3, 4, DType::F64);
        let (loss, per) = controlface::diffusion::noise_prediction_loss(&a, &b).unwrap();
        prop_assert!(loss.to_scalar::<f64>().unwrap() >= 0.0);
        prop_assert!(per.iter().all(|v| *v >= 0.0));
    }
}

fn random_batch(b: usize, res: usize, dtype: DType) -> Batch {
    Batch {
        z_ref: random_images(40, b, 3, res, dtype).affine(2.0, -1.0).unwrap(),
        z_tgt: random_images(41, b, 3, res, dtype).affine(2.0, -1.0).unwrap(),
        d_ref: random_images(42, b, 9, res, dtype),
        d_tgt: random_images(43, b, 9, res, dtype),
    }
}

#[test]
fn loss_with_stub_predictors() {
    let s = default_schedule();
    let batch = random_batch(256, 16, DType::F64);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // The oracle recovers ε from z_t and the clean target.
    let oracle = training_loss_with(&s, &batch, &mut rng, &Dropout::NONE, |zt, ts, _| {
        let a = Tensor::from_vec(
            ts.iter().map(|t| s.alpha_bar(*t).unwrap()).collect::<Vec<f64>>(),
            (ts.len(), 1, 1, 1),
            &CPU,
        )
        .unwrap();
        let signal = batch.z_tgt.broadcast_mul(&a.sqrt().unwrap()).unwrap();
        Ok((zt - signal).unwrap().broadcast_div(&(1.0 - a).unwrap().sqrt().unwrap()).unwrap())
    })
    .unwrap();
    assert!(oracle.loss.to_scalar::<f64>().unwrap() < 1e-12);

    let zero = training_loss_with(&s, &batch, &mut rng, &Dropout::NONE, |zt, _, _| Ok(zt.zeros_like()?)).unwrap();
    let n = batch.z_tgt.elem_count() as f64;
    let loss = zero.loss.to_scalar::<f64>().unwrap();
    // Var of a squared unit Gaussian is 2.
    assert!((loss - 1.0).abs() <= 3.0 * (2.0 / n).sqrt(), "{loss}");
    assert_eq!(zero.per_sample.len(), 256);
    assert!(zero.timesteps.iter().all(|t| (1..=1000).contains(t)));

    let bad = training_loss_with(&s, &batch, &mut rng, &Dropout::NONE, |zt, _, _| {
        let mut v = to_vec(zt);
        v[5 * 768 + 3] = f64::NAN;
        Ok(Tensor::from_vec(v, zt.dims(), &CPU)?)
    });
    match bad {
        Err(Error::Numerical { location, .. }) => assert!(location.contains("sample 5"), "{location}"),
        other => panic!("expected a numerical fault, got {other:?}"),
    }
}

fn guided(model: &controlface::nets::ModelState, mode: GuidanceMode, w: f64, d_ref_is_tgt: bool) -> (Tensor, Option<Tensor>) {
    let batch = random_batch(2, 16, model.dtype());
    let d_ref = if d_ref_is_tgt { &batch.d_tgt } else { &batch.d_ref };
    let inputs = SampleInputs {
        z_ref: &batch.z_ref,
        d_tgt: &batch.d_tgt,
        d_ref: Some(d_ref),
    };
    let prepared = prepare_guidance(model, GuidanceSpec::new(mode, w).unwrap(), inputs).unwrap();
    guided_epsilon(model, &prepared, &batch.z_tgt, &[250, 700]).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    to_vec(t).iter().map(|v| v.to_bits()).collect()
}

#[test]
fn modes_agree_exactly_at_unit_scale() {
    let model = tiny_model(DType::F64);
    randomise(&model, 5);
    let reference = guided(&model, GuidanceMode::None, 1.0, false).0;
    for mode in GuidanceMode::ALL {
        let (eps, delta) = guided(&model, mode, 1.0, false);
        assert!(delta.is_none());
        assert_eq!(bits(&eps), bits(&reference), "{}", mode.name());
        // Every baseline genuinely differs from the conditional pass.
        if mode != GuidanceMode::None {
            let (_, d) = guided(&model, mode, 2.0, false);
            assert!(to_vec(&d.unwrap()).iter().any(|v| v.abs() > 1e-9), "{}", mode.name());
        }
    }
}

#[test]
fn rcg_with_reference_equal_to_target_is_scale_free() {
    let model = tiny_model(DType::F64);
    randomise(&model, 6);
    let cond = guided(&model, GuidanceMode::None, 1.0, true).0;
    for w in [0.0, 0.5, 2.0, 4.0, 7.5] {
        let (eps, delta) = guided(&model, GuidanceMode::Rcg, w, true);
        assert!(to_vec(&delta.unwrap()).iter().all(|v| *v == 0.0));
        assert_eq!(bits(&eps), bits(&cond), "w={w}");
    }
}

#[test]
fn guidance_is_affine_in_scale() {
    let model = tiny_model(DType::F64);
    randomise(&model, 7);
    for mode in GuidanceMode::ALL.into_iter().filter(|m| *m != GuidanceMode::None) {
        let g: Vec<Vec<f64>> = [0.0, 1.0, 2.0].iter().map(|w| to_vec(&guided(&model, mode, *w, false).0)).collect();
        let (_, delta) = guided(&model, mode, 2.0, false);
        let delta = to_vec(&delta.unwrap());
        for i in 0..g[0].len() {
            let (a, b, c) = (g[0][i], g[1][i], g[2][i]);
            assert!(((b - a) - (c - b)).abs() < 1e-6, "{}: {a} {b} {c}", mode.name());
            assert!(((c - b) - delta[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn rcg_requires_reference_control() {
    let model = tiny_model(DType::F32);
    let batch = random_batch(1, 16, DType::F32);
    let inputs = SampleInputs {
        z_ref: &batch.z_ref,
        d_tgt: &batch.d_tgt,
        d_ref: None,
    };
    let err = prepare_guidance(&model, GuidanceSpec::new(GuidanceMode::Rcg, 4.0).unwrap(), inputs).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err:?}");
    assert!(prepare_guidance(&model, GuidanceSpec::new(GuidanceMode::CfgContext, 4.0).unwrap(), inputs).is_ok());
}

#[test]
fn ddim_is_deterministic_bounded_and_recorded() {
    let model = tiny_model(DType::F32);
    randomise(&model, 8);
    let batch = random_batch(2, 16, DType::F32);
    let inputs = SampleInputs {
        z_ref: &batch.z_ref,
        d_tgt: &batch.d_tgt,
        d_ref: Some(&batch.d_ref),
    };
    let noise = initial_noise(9, &[0, 1], 16, DType::F32, &CPU).unwrap();
    let rcg = GuidanceSpec::new(GuidanceMode::Rcg, 4.0).unwrap();
    let a = ddim_sample(&model, inputs, rcg, 50, &noise, true).unwrap();
    let b = ddim_sample(&model, inputs, rcg, 50, &noise, true).unwrap();
    assert_eq!(a.images, b.images);
    let rec = a.record.unwrap();
    assert_eq!(rec, b.record.unwrap());
    assert_eq!(rec.steps.len(), 50);
    assert_eq!(rec.steps[0].t, 1000);
    for s in &rec.steps {
        assert_eq!(s.delta.len(), 2);
        assert_eq!(s.x0.len(), 2);
        assert!(s.delta.iter().chain(&s.x0).all(|r| r.res == 16 && r.channels == 3));
    }
    assert_eq!(TrajectoryRecord::decode(&rec.encode().unwrap()).unwrap(), rec);

    let none = GuidanceSpec::new(GuidanceMode::None, 1.0).unwrap();
    for steps in [50, 1000] {
        let out = ddim_sample(&model, inputs, none, steps, &noise, false).unwrap();
        assert!(out.record.is_none());
        for img in &out.images {
            assert!(img.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }
    let rcg1 = ddim_sample(&model, inputs, GuidanceSpec::new(GuidanceMode::Rcg, 1.0).unwrap(), 20, &noise, false).unwrap();
    let plain = ddim_sample(&model, inputs, none, 20, &noise, false).unwrap();
    assert_eq!(rcg1.images, plain.images);
}

#[test]
fn training_loss_gradients_match_finite_differences() {
    let model = tiny_model(DType::F64);
    randomise(&model, 12);
    let batch = random_batch(2, 16, DType::F64);
    let objective = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        training_loss(&model, &batch, &mut rng, &Dropout::default()).unwrap().loss
    };
    let checked = check_gradients(&model, objective, 10, 123);
    eprintln!("checked: {checked:?}");
}
