use std::collections::HashSet;

use controlface::dataset::container::{decode, encode, read_container, ContainerReader, HEADER_LEN};
use controlface::dataset::*;
use controlface::facegen::sample_identity;
use controlface::Error;
use proptest::prelude::*;

fn spec() -> CorpusSpec {
    CorpusSpec {
        master_seed: 7,
        identities: 5,
        held_out: 2,
        frames: 6,
        pairs_per_identity: 2,
        res: 16,
        reconstruction_mode: false,
    }
}

#[test]
fn roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_corpus(&spec()).unwrap();
    assert_eq!(samples.len(), 10);
    let back = dataset_roundtrip(&samples, &dir.path().join("q.cfq")).unwrap();
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.x_ref.data), bits(&b.x_ref.data));
        assert_eq!(bits(&a.d_tgt.data.data), bits(&b.d_tgt.data.data));
        assert_eq!(a, b);
    }
}

#[test]
fn truncated_file_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.cfq");
    let samples = generate_corpus(&spec()).unwrap();
    write_container(&path, 16, &samples).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = &bytes[..bytes.len() - 7];
    std::fs::write(&path, cut).unwrap();
    match read_container(&path) {
        Err(Error::Format { record: Some(9), .. }) => {}
        other => panic!("expected format error naming record 9, got {other:?}"),
    }
    assert!(matches!(ContainerReader::open(&path), Err(Error::Format { .. })));
    assert!(decode(&bytes[..HEADER_LEN - 1]).is_err());
}

#[test]
fn empty_container_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.cfq");
    write_container(&path, 32, &[]).unwrap();
    let (header, samples) = read_container(&path).unwrap();
    assert_eq!(header.count, 0);
    assert_eq!(header.res, 32);
    assert!(samples.is_empty());
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, HEADER_LEN);
}

#[test]
fn reader_gives_random_access() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.cfq");
    let samples = generate_corpus(&spec()).unwrap();
    write_container(&path, 16, &samples).unwrap();
    let mut r = ContainerReader::open(&path).unwrap();
    assert_eq!(r.len(), samples.len());
    for i in [7, 0, 3] {
        assert_eq!(r.read(i).unwrap(), samples[i]);
    }
    assert!(r.read(samples.len()).is_err());
}

#[test]
fn generation_is_byte_identical_across_thread_counts() {
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| encode(16, &generate_corpus(&spec()).unwrap()).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, encode(16, &generate_corpus(&spec()).unwrap()).unwrap());
}

#[test]
fn held_out_identities_are_disjoint() {
    let s = CorpusSpec::default();
    let train: HashSet<u64> = s.train_seeds().into_iter().collect();
    assert_eq!(train.len(), 200);
    assert!(s.held_out_seeds().iter().all(|h| !train.contains(h)));
    assert_eq!(s.held_out_seeds().len(), 20);
}

#[test]
fn identities_do_not_share_shape() {
    let s = CorpusSpec::default();
    let mut seen = HashSet::new();
    for seed in s.train_seeds().into_iter().chain(s.held_out_seeds()) {
        let shape = sample_identity(seed).shape.map(f32::to_bits);
        assert!(seen.insert(shape), "duplicate shape for seed {seed}");
    }
    assert!(seen.len() >= 200);
}

#[test]
fn pose_deltas_are_symmetric() {
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let n = 10_000;
    for k in 0..n as u64 {
        let traj = generate_trajectory(k / 50, 16).unwrap();
        let (r, t) = draw_pair(traj.len(), k, false);
        for c in 0..3 {
            let d = (traj.states[t].pose[c] - traj.states[r].pose[c]) as f64;
            sums[c] += d;
            sq[c] += d * d;
        }
    }
    for c in 0..3 {
        let mean = sums[c] / n as f64;
        let var = sq[c] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "axis {c}: mean {mean} se {se}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn pairs_are_distinct_and_in_range(n in 2usize..256, seed in any::<u64>()) {
        let (r, t) = draw_pair(n, seed, false);
        prop_assert!(r < n && t < n && r != t);
        let (a, b) = draw_pair(n, seed, true);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn trajectory_steps_are_bounded(seed in any::<u64>(), len in 2usize..40) {
        let t = generate_trajectory(seed, len).unwrap();
        prop_assert_eq!(t.len(), len);
        for w in t.states.windows(2) {
            for (a, b) in w[0].expression.iter().chain(&w[0].pose).zip(w[1].expression.iter().chain(&w[1].pose)) {
                prop_assert!((a - b).abs() <= trajectory::MOTION_STEP + 1e-6);
            }
            for (a, b) in w[0].lighting.iter().zip(&w[1].lighting) {
                prop_assert!((a - b).abs() <= trajectory::LIGHTING_STEP + 1e-6);
            }
            prop_assert!(w[1].in_bounds());
        }
    }
}
