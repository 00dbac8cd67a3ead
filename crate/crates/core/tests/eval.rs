use candle_core::DType;
use controlface::diffusion::GuidanceMode;
use controlface::eval::*;
use controlface::facegen::fit::{lighting_rmse, normal_map_rmse};
use controlface::facegen::render::render_face;
use controlface::facegen::{sample_identity, sample_state, FaceParams};
use controlface::nets::{ModelConfig, NetConfig};
use controlface::raster::Raster;
use controlface::train::{TrainConfig, Trainer};
use controlface::Error;

const FIT: FitConfig = FitConfig { starts: 8, seed: 21 };

fn requests(res: usize, per: usize) -> Vec<RigRequest> {
    make_requests(&[901, 902, 903, 904, 905], per, res, 77).unwrap()
}

#[test]
fn ground_truth_renders_reinfer_within_tolerance() {
    let reqs = requests(32, 6);
    let truth: Vec<Raster> = reqs.iter().map(|r| r.quad.x_tgt.clone()).collect();
    let errs = reinference_errors(&truth, &reqs, &FIT).unwrap();
    let mut ok = 0;
    for (e, r) in errs.iter().zip(&reqs) {
        let tol = if r.attribute == Attribute::Light { 0.05 } else { 1.0 };
        match e {
            Some(v) if *v < tol => ok += 1,
            other => eprintln!("request {} {:?}: {other:?}", r.index, r.attribute),
        }
    }
    assert!(ok * 100 >= 95 * reqs.len(), "{ok}/{}", reqs.len());
    let table = summarise(&errs, &reqs);
    assert!(table.valid);
    for (a, v) in &table.per_attribute {
        let tol = if *a == Attribute::Light { 0.05 } else { 1.0 };
        assert!(v.mean.unwrap() < tol, "{a:?}: {v:?}");
    }
}

#[test]
fn ignoring_the_control_costs_the_reference_target_gap() {
    let reqs = requests(32, 3);
    let refs: Vec<Raster> = reqs.iter().map(|r| r.quad.x_ref.clone()).collect();
    let errs = reinference_errors(&refs, &reqs, &FIT).unwrap();
    for (e, r) in errs.iter().zip(&reqs) {
        let (a, b) = (r.params_ref(), r.params_tgt());
        let (gap, tol) = match r.attribute {
            Attribute::Light => (lighting_rmse(&a.state, &b.state), 0.05),
            _ => (100.0 * normal_map_rmse(a, b, 32).unwrap(), 1.0),
        };
        let e = e.expect("reference render fits");
        assert!((e - gap).abs() < tol, "request {} {:?}: {e} vs gap {gap}", r.index, r.attribute);
    }
}

#[test]
fn empty_request_list_is_invalid() {
    let t = reinference_error(&[], &[], &FIT).unwrap();
    assert!(!t.valid);
    assert!(t.average.is_none());
}

#[test]
fn background_gap_is_area_weighted() {
    let id = sample_identity(5);
    let st = sample_state(&id, 6);
    let p = FaceParams::new(id, st);
    let reference = render_face(&p, 32).unwrap();
    let mut other = p;
    other.identity.background = [0.9, 0.1, 0.4];
    let generated = render_face(&other, 32).unwrap().image;
    let mask: Vec<bool> = reference.mask.iter().map(|m| !m).collect();
    let bg = id.background;
    let n_mask = mask.iter().filter(|m| **m).count();
    let n_bg = (0..mask.len())
        .filter(|px| mask[*px] && (0..3).all(|c| reference.image.data[px * 3 + c] == bg[c]))
        .count();
    let gap: f64 = (0..3).map(|c| ((other.identity.background[c] - bg[c]) as f64).powi(2)).sum::<f64>() / 3.0;
    let want = gap * n_bg as f64 / n_mask as f64;
    let got = appearance_consistency(&[generated], &[reference.image.clone()], &[mask.clone()]).unwrap();
    assert!(got > 0.0);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    assert_eq!(appearance_consistency(&[reference.image.clone()], &[reference.image], &[mask]).unwrap(), 0.0);
}

#[test]
fn embedder_training_and_similarity() {
    let train_ids: Vec<u64> = (0..10).map(|i| 100 + i).collect();
    let untrained = IdentityEmbedder::new(32, 10, 0).unwrap();
    let img = render_face(&FaceParams::new(sample_identity(1), sample_state(&sample_identity(1), 1)), 32).unwrap().image;
    assert!(matches!(identity_similarity(&[img.clone()], &[img.clone()], &untrained), Err(Error::Contract(_))));

    let emb = train_embedder(&train_ids, 32, &EmbedderConfig::default(), 3).unwrap();
    eprintln!("embedder accuracy {:?} after {} steps", emb.accuracy, emb.steps);
    assert!(emb.is_ready());
    let s = identity_similarity(&[img.clone()], &[img.clone()], &emb).unwrap();
    assert!((s - 1.0).abs() < 1e-6);

    // Held-out identities: same identity in another state vs another identity.
    let render = |i: u64, k: u64| {
        let id = sample_identity(i);
        render_face(&FaceParams::new(id, sample_state(&id, k)), 32).unwrap().image
    };
    let held: Vec<u64> = (0..8).map(|i| 5000 + i).collect();
    let a: Vec<Raster> = held.iter().map(|i| render(*i, 1)).collect();
    let same: Vec<Raster> = held.iter().map(|i| render(*i, 2)).collect();
    let cross: Vec<Raster> = held.iter().map(|i| render(held[((*i - 5000 + 1) % 8) as usize], 2)).collect();
    let s_same = identity_similarity(&a, &same, &emb).unwrap();
    let s_cross = identity_similarity(&a, &cross, &emb).unwrap();
    eprintln!("same {s_same:.3} cross {s_cross:.3}");
    assert!(s_cross < s_same);
}

fn tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = ModelConfig {
        net: NetConfig::tiny(),
        ..ModelConfig::default()
    };
    let tr = Trainer::new(cfg, TrainConfig::default(), 9).unwrap();
    let p = dir.join("tiny.bin");
    tr.save(&p).unwrap();
    p
}

const FAST: SamplingConfig = SamplingConfig {
    steps: 4,
    batch_size: 4,
    seed: 3,
};

#[test]
fn sweep_shape_degeneracy_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = controlface::train::load_model(&tiny_checkpoint(dir.path())).unwrap();
    let reqs = requests(16, 1);
    let fit = FitConfig { starts: 2, seed: 1 };
    let modes = GuidanceMode::ALL.to_vec();
    let grid = [1.0, 2.5];
    let table = guidance_sweep(&model, &reqs, &modes, &grid, &FAST, &fit).unwrap();
    assert_eq!(table.rows.len(), modes.len());
    assert!(table.rows.iter().all(|r| r.len() == grid.len()));
    for row in &table.rows {
        assert_eq!(row[0], table.rows[0][0]);
    }
    let again = guidance_sweep(&model, &reqs, &modes, &grid, &FAST, &fit).unwrap();
    assert_eq!(serde_json::to_vec(&table).unwrap(), serde_json::to_vec(&again).unwrap());

    let canvas = sweep_plot(&table);
    for m in 0..modes.len() {
        let color = controlface::eval::plot::mode_color(m);
        // Curve pixels, excluding the legend column.
        let hits = (0..canvas.height)
            .flat_map(|y| (0..canvas.width - 40).map(move |x| (x, y)))
            .filter(|(x, y)| {
                let i = (y * canvas.width + x) * 3;
                canvas.rgb[i..i + 3] == color
            })
            .count();
        if table.averages(m).iter().any(|v| v.is_some()) {
            assert!(hits > 0, "mode {m} has no curve");
        }
    }
}

#[test]
fn ablation_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let ck = tiny_checkpoint(dir.path());
    let reqs = requests(16, 1);
    let fit = FitConfig { starts: 2, seed: 1 };
    let entry = |name: &str, path: &std::path::Path| AblationEntry {
        name: name.into(),
        checkpoint: path.to_path_buf(),
        mode: GuidanceMode::Rcg,
        w: 2.0,
    };
    let entries = [entry("a", &ck), entry("b", &ck)];
    let out = ablation_run(&entries, &reqs, None, &FAST, &fit, "digest").unwrap();
    assert_eq!(out.keys().cloned().collect::<Vec<_>>(), vec!["a".to_string(), "b".to_string()]);
    assert_eq!(out["a"], out["b"]);
    assert_eq!(out["a"].sample_count, 4);
    assert_eq!(out["a"].config_digest, "digest");
    let missing = [entry("gone", &dir.path().join("nope.bin"))];
    match ablation_run(&missing, &reqs, None, &FAST, &fit, "") {
        Err(Error::Missing(m)) => assert!(m.contains("gone")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn delta_grid_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = controlface::train::load_model(&tiny_checkpoint(dir.path())).unwrap();
    let reqs = requests(16, 1);
    let sampling = SamplingConfig { steps: 10, ..FAST };
    let (canvas, info) = delta_grid(&model, &reqs[0], 4.0, 3, &sampling).unwrap();
    assert_eq!(info.timesteps.len(), 3);
    assert_eq!(info.timesteps[0], 1000);
    assert_eq!(info.columns, vec!["cfg_controller delta", "rcg delta", "cfg_controller x0", "rcg x0"]);
    let tile = 64 + 2;
    assert_eq!(canvas.width, 4 * tile + 2);
    assert_eq!(canvas.height, 3 * tile + 2);
    assert_eq!(model.dtype(), DType::F32);
}
