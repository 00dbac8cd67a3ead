use rand::Rng;
use serde::{Deserialize, Serialize};

use super::trajectory::Trajectory;
use crate::facegen::{make_control, render_face, ControlMaps, FaceParams};
use crate::raster::Raster;
use crate::rng::{stream, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadMeta {
    pub identity_seed: u64,
    pub ref_frame: u32,
    pub tgt_frame: u32,
    pub params_ref: FaceParams,
    pub params_tgt: FaceParams,
}

/// `{X_R, X_T, D_R, D_T}` plus the ground truth that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadruplet {
    pub x_ref: Raster,
    pub x_tgt: Raster,
    pub d_ref: ControlMaps,
    pub d_tgt: ControlMaps,
    pub meta: QuadMeta,
}

impl Quadruplet {
    /// Renders both frames of a parameter pair.
    pub fn from_params(
        identity_seed: u64,
        frames: (u32, u32),
        params_ref: FaceParams,
        params_tgt: FaceParams,
        res: usize,
    ) -> Result<Self> {
        let ref_bundle = render_face(&params_ref, res)?;
        let d_ref = make_control(&ref_bundle)?;
        let (x_tgt, d_tgt) = if params_tgt == params_ref {
            (ref_bundle.image.clone(), d_ref.clone())
        } else {
            let b = render_face(&params_tgt, res)?;
            let d = make_control(&b)?;
            (b.image, d)
        };
        Ok(Quadruplet {
            x_ref: ref_bundle.image,
            x_tgt,
            d_ref,
            d_tgt,
            meta: QuadMeta {
                identity_seed,
                ref_frame: frames.0,
                tgt_frame: frames.1,
                params_ref,
                params_tgt,
            },
        })
    }

    pub fn res(&self) -> usize {
        self.x_ref.res
    }
}

/// Frame indices `(reference, target)` for a trajectory of `n >= 2` frames:
/// an ordered pair of distinct indices, uniform over all `n (n - 1)` pairs,
/// or one uniform index used twice in reconstruction mode.
pub fn draw_pair(n: usize, pair_seed: u64, reconstruction_mode: bool) -> (usize, usize) {
    let mut rng = stream(pair_seed, Stream::Pair);
    let i = rng.random_range(0..n);
    if reconstruction_mode {
        return (i, i);
    }
    // Uniform over the other n - 1 frames.
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    (i, j)
}

/// Picks an ordered pair of distinct frames (or one frame twice in
/// reconstruction mode) and renders the quadruplet.
pub fn build_quadruplet(
    traj: &Trajectory,
    pair_seed: u64,
    reconstruction_mode: bool,
    res: usize,
) -> Result<Quadruplet> {
    let n = traj.len();
    if n == 0 || (!reconstruction_mode && n < 2) {
        return Err(Error::contract(format!(
            "trajectory of length {n} cannot supply a frame pair"
        )));
    }
    let (r, t) = draw_pair(n, pair_seed, reconstruction_mode);
    Quadruplet::from_params(
        traj.seed,
        (r as u32, t as u32),
        traj.params(r),
        traj.params(t),
        res,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_trajectory;

    #[test]
    fn reconstruction_mode_duplicates_the_frame() {
        let t = generate_trajectory(3, 8).unwrap();
        let q = build_quadruplet(&t, 11, true, 32).unwrap();
        assert_eq!(q.x_ref, q.x_tgt);
        assert_eq!(q.d_ref, q.d_tgt);
        assert_eq!(q.meta.ref_frame, q.meta.tgt_frame);
    }

    #[test]
    fn paired_mode_uses_distinct_frames_and_exact_controls() {
        let t = generate_trajectory(4, 8).unwrap();
        for seed in 0..30 {
            let q = build_quadruplet(&t, seed, false, 32).unwrap();
            assert_ne!(q.meta.ref_frame, q.meta.tgt_frame);
            let d = make_control(&render_face(&q.meta.params_tgt, 32).unwrap()).unwrap();
            assert_eq!(d, q.d_tgt);
            assert_eq!(q.meta.params_ref.identity, q.meta.params_tgt.identity);
        }
    }

    #[test]
    fn short_trajectory_is_rejected_for_pairs() {
        let mut t = generate_trajectory(4, 2).unwrap();
        t.states.truncate(1);
        assert!(build_quadruplet(&t, 0, false, 16).is_err());
        assert!(build_quadruplet(&t, 0, true, 16).is_ok());
    }
}
