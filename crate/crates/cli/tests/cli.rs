use std::path::Path;
use std::process::{Command, Output};

use controlface::dataset::read_container;
use controlface::diffusion::TrajectoryRecord;
use controlface::facegen::{sample_identity, sample_state, FaceParams};
use controlface_cli::commands::Manifest;

const TINY: &str = r#"{
  "seed": 5,
  "data": {"identities": 3, "held_out": 2, "frames": 4, "pairs_per_identity": 2, "res": 16},
  "model": {"net": {"res": 16, "base_channels": 8, "channel_mults": [1, 2, 2, 2], "norm_groups": 4,
                    "context_dim": 16, "cmm_channels": [8, 8, 8, 8]}},
  "train": {"steps": 2, "batch_size": 2, "checkpoint_every": 2},
  "sample": {"steps": 4}
}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_controlface"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn setup(config: &str) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("c.json"), config).unwrap();
    tmp
}

fn with_data(config: &str, field: &str) -> String {
    config.replace(r#""pairs_per_identity": 2"#, &format!(r#""pairs_per_identity": 2, {field}"#))
}

#[test]
fn gen_data_is_deterministic_and_counted() {
    let tmp = setup(TINY);
    let d = tmp.path();
    ok(d, &["--config", "c.json", "gen-data", "--out", "a.cfq"]);
    ok(d, &["--config", "c.json", "--workers", "1", "gen-data", "--out", "b.cfq"]);
    assert_eq!(std::fs::read(d.join("a.cfq")).unwrap(), std::fs::read(d.join("b.cfq")).unwrap());
    let m: Manifest = serde_json::from_slice(&std::fs::read(d.join("a.cfq.manifest.json")).unwrap()).unwrap();
    assert_eq!(m.records, 6);
    assert_eq!(m.config_digest.len(), 64);
    let (h, quads) = read_container(&d.join("a.cfq")).unwrap();
    assert_eq!((h.count, h.res), (6, 16));
    assert!(quads.iter().any(|q| q.x_ref != q.x_tgt));
}

#[test]
fn reconstruction_mode_pairs_each_frame_with_itself() {
    let tmp = setup(&with_data(TINY, r#""reconstruction_mode": true"#));
    ok(tmp.path(), &["--config", "c.json", "gen-data", "--out", "r.cfq"]);
    let (_, quads) = read_container(&tmp.path().join("r.cfq")).unwrap();
    assert!(quads.iter().all(|q| q.x_ref == q.x_tgt && q.d_ref == q.d_tgt));
}

#[test]
fn one_pair_per_trajectory_gives_one_record_per_identity() {
    let cfg = TINY
        .replace(r#""identities": 3"#, r#""identities": 200"#)
        .replace(r#""frames": 4"#, r#""frames": 32"#)
        .replace(r#""pairs_per_identity": 2"#, r#""pairs_per_identity": 1"#);
    let tmp = setup(&cfg);
    ok(tmp.path(), &["--config", "c.json", "gen-data", "--out", "x.cfq"]);
    assert_eq!(read_container(&tmp.path().join("x.cfq")).unwrap().0.count, 200);
}

#[test]
fn invalid_configs_exit_2_before_writing() {
    let tmp = setup(&TINY.replace(r#""frames": 4"#, r#""frames": 1"#));
    let out = run(tmp.path(), &["--config", "c.json", "gen-data", "--out", "x.cfq"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.frames"));
    assert!(!tmp.path().join("x.cfq").exists());

    std::fs::write(tmp.path().join("u.json"), r#"{"sample": {"stepz": 3}}"#).unwrap();
    let out = run(tmp.path(), &["--config", "u.json", "gen-data", "--out", "x.cfq"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn environment_overrides_flags_defaults() {
    let tmp = setup(TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_controlface"))
        .current_dir(tmp.path())
        .env("CONTROLFACE_CONFIG", "c.json")
        .env("CONTROLFACE_SEED", "9")
        .args(["gen-data", "--out", "e.cfq"])
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(tmp.path(), &["--config", "c.json", "--seed", "9", "gen-data", "--out", "f.cfq"]);
    ok(tmp.path(), &["--config", "c.json", "gen-data", "--out", "g.cfq"]);
    let read = |n: &str| std::fs::read(tmp.path().join(n)).unwrap();
    assert_eq!(read("e.cfq"), read("f.cfq"));
    assert_ne!(read("e.cfq"), read("g.cfq"));
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = setup(TINY);
    let out = run(tmp.path(), &["--config", "c.json", "train", "--data", "nope.cfq", "--out", "ck"]);
    assert_eq!(code(&out), 3);
    let out = run(tmp.path(), &["--config", "missing.json", "gen-data", "--out", "x.cfq"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn training_on_data_of_another_resolution_exits_2() {
    let tmp = setup(TINY);
    let wide = TINY.replace(r#""res": 16"#, r#""res": 32"#);
    std::fs::write(tmp.path().join("wide.json"), wide).unwrap();
    ok(tmp.path(), &["--config", "wide.json", "gen-data", "--out", "w.cfq"]);
    let out = run(tmp.path(), &["--config", "c.json", "train", "--data", "w.cfq", "--out", "ck"]);
    assert_eq!(code(&out), 2);
    assert!(!tmp.path().join("ck/latest.bin").exists());
}

#[test]
fn sampling_contracts() {
    let tmp = setup(TINY);
    let d = tmp.path();
    ok(d, &["--config", "c.json", "gen-data", "--out", "d.cfq"]);
    ok(d, &["--config", "c.json", "train", "--data", "d.cfq", "--out", "ck", "--log-every", "0"]);
    let base = ["--config", "c.json", "sample", "--checkpoint", "ck/latest.bin", "--data", "d.cfq", "--index", "1"];
    let sample = |extra: &[&str]| {
        let mut a: Vec<&str> = base.to_vec();
        a.extend_from_slice(extra);
        ok(d, &a);
    };
    let read = |n: &str| std::fs::read(d.join(n)).unwrap();

    sample(&["--out", "a.png"]);
    sample(&["--out", "b.png"]);
    assert_eq!(read("a.png"), read("b.png"));

    sample(&["--mode", "rcg", "--w", "1", "--out", "rcg1.png"]);
    sample(&["--mode", "none", "--out", "none.png"]);
    assert_eq!(read("rcg1.png"), read("none.png"));

    sample(&["--steps", "50", "--record-trajectory", "t.cft", "--out", "c.png"]);
    let rec = TrajectoryRecord::read(&d.join("t.cft")).unwrap();
    assert_eq!(rec.steps.len(), 50);

    let id = sample_identity(4);
    let params = FaceParams::new(id, sample_state(&id, 8));
    std::fs::write(d.join("p.json"), serde_json::to_string(&params).unwrap()).unwrap();
    sample(&["--target-params", "p.json", "--out", "p.png"]);
    sample(&["--target-index", "3", "--out", "q.png"]);

    let img = ["--config", "c.json", "sample", "--checkpoint", "ck/latest.bin", "--reference-image", "a.png"];
    let mut a = img.to_vec();
    a.extend_from_slice(&["--target-params", "p.json", "--mode", "cfg_context", "--out", "i.png"]);
    ok(d, &a);
    let mut a = img.to_vec();
    a.extend_from_slice(&["--target-params", "p.json", "--mode", "rcg", "--w", "4", "--out", "j.png"]);
    let out = run(d, &a);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("j.png").exists());
}
