use controlface::facegen::fit::{lighting_rmse, normal_map_rmse};
use controlface::facegen::params::*;
use controlface::facegen::sh::{band_energies, sh_basis};
use controlface::facegen::*;
use controlface::raster::Raster;
use proptest::prelude::*;

fn random_params(seed: u64) -> FaceParams {
    let id = sample_identity(seed);
    FaceParams::new(id, sample_state(&id, seed ^ 0xABCD))
}

#[test]
fn normals_are_unit_on_face_pixels() {
    for seed in 0..100 {
        let b = render_face(&random_params(seed), 64).unwrap();
        for (px, m) in b.mask.iter().enumerate() {
            if *m {
                let n: Vec<f64> = (0..3)
                    .map(|c| 2.0 * b.normals.data[px * 3 + c] as f64 - 1.0)
                    .collect();
                let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
                assert!((len - 1.0).abs() <= 1e-4, "seed {seed} px {px}: {len}");
            } else {
                assert!(b.normals.data[px * 3..px * 3 + 3].iter().all(|v| *v == 0.5));
            }
        }
    }
}

#[test]
fn shaded_is_albedo_times_clamped_irradiance() {
    for seed in 0..100 {
        let b = render_face(&random_params(seed), 64).unwrap();
        for px in 0..b.mask.len() {
            let e = if b.mask[px] {
                b.irradiance.data[px].clamp(0.0, 1.0)
            } else {
                0.0
            };
            for c in 0..3 {
                assert_eq!(b.shaded.data[px * 3 + c], b.albedo.data[px * 3 + c] * e);
            }
        }
    }
}

fn rotate(axis: [f64; 3], angle: f64, v: [f64; 3]) -> [f64; 3] {
    // Rodrigues' formula.
    let (s, c) = angle.sin_cos();
    let dot = axis[0] * v[0] + axis[1] * v[1] + axis[2] * v[2];
    let cross = [
        axis[1] * v[2] - axis[2] * v[1],
        axis[2] * v[0] - axis[0] * v[2],
        axis[0] * v[1] - axis[1] * v[0],
    ];
    [0, 1, 2].map(|i| v[i] * c + cross[i] * s + axis[i] * dot * (1.0 - c))
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|x| x / l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn sh_band_energy_is_rotation_invariant(
        v in prop::array::uniform3(-1.0f64..1.0),
        a in prop::array::uniform3(-1.0f64..1.0),
        angle in -3.14f64..3.14,
    ) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let n = unit(v);
        let rn = unit(rotate(unit(a), angle, n));
        let e = band_energies(&sh_basis(n).unwrap());
        let er = band_energies(&sh_basis(rn).unwrap());
        for k in 0..3 {
            prop_assert!((e[k] - er[k]).abs() <= 1e-5, "band {k}: {} vs {}", e[k], er[k]);
        }
    }
}

#[test]
fn fit_at_ground_truth_has_zero_residual() {
    let id = sample_identity(21);
    let state_seed = 77;
    let truth = FaceParams::new(id, sample_state(&id, state_seed));
    let obs = make_control(&render_face(&truth, 64).unwrap()).unwrap();
    let fit = fit_params(Observation::Controls(&obs), &[5, state_seed, 9], Some(&id)).unwrap();
    assert!(fit.residual < 1e-6, "residual {}", fit.residual);
    assert!(fit.converged);
}

#[test]
fn fit_on_empty_observation_is_not_converged() {
    let id = sample_identity(3);
    let empty = ControlMaps::null(32);
    let fit = fit_params(Observation::Controls(&empty), &[1, 2], Some(&id)).unwrap();
    assert!(!fit.converged, "residual {}", fit.residual);

    let background = Raster::filled(32, 3, 0.9);
    let fit = fit_params(Observation::Image(&background), &[1, 2], Some(&id)).unwrap();
    assert!(!fit.converged, "residual {}", fit.residual);
}

#[test]
fn fit_rejects_empty_seed_list_and_bad_resolution() {
    let obs = ControlMaps::null(32);
    assert!(fit_params(Observation::Controls(&obs), &[], None).is_err());
    let odd = Raster::filled(24, 3, 0.1);
    assert!(fit_params(Observation::Image(&odd), &[1], None).is_err());
}

/// Frozen identity, 8 random starts: state recovered from clean renders.
#[test]
fn fit_recovers_state_from_clean_renders() {
    let trials = 50;
    let mut ok = 0;
    let t0 = std::time::Instant::now();
    for trial in 0..trials {
        let id = sample_identity(1000 + trial);
        let truth = FaceParams::new(id, sample_state(&id, 5000 + trial));
        let obs = make_control(&render_face(&truth, 64).unwrap()).unwrap();
        let seeds: Vec<u64> = (0..8).map(|k| 90_000 + trial * 8 + k).collect();
        let fit = fit_params(Observation::Controls(&obs), &seeds, Some(&id)).unwrap();
        let n_rmse = normal_map_rmse(&truth, &fit.params, 64).unwrap();
        let l_rmse = lighting_rmse(&truth.state, &fit.params.state);
        let pass = n_rmse < 0.01 && l_rmse < 0.05;
        if pass {
            ok += 1;
        } else {
            eprintln!(
                "trial {trial}: normal rmse {n_rmse:.4}, sh rmse {l_rmse:.4}, residual {:.3e}",
                fit.residual
            );
        }
    }
    eprintln!("fit recovery {ok}/{trials} in {:?}", t0.elapsed());
    assert!(ok * 100 >= 95 * trials as usize, "{ok}/{trials}");
}

#[test]
fn sample_state_pose_stays_in_range() {
    for seed in 0..500 {
        let id = sample_identity(seed);
        let s = sample_state(&id, seed);
        assert!(s.pose.iter().all(|p| (-POSE_LIMIT..=POSE_LIMIT).contains(p)));
        assert!(s.in_bounds());
    }
}
