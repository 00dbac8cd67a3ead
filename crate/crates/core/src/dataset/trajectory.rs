use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::facegen::params::*;
use crate::facegen::sample::{lighting_is_valid, sample_identity, sample_state, MAX_LIGHTING_ATTEMPTS};
use crate::rng::{stream, Stream};
use crate::{Error, Result};

/// Largest per-frame change of an expression or pose component.
pub const MOTION_STEP: f32 = 0.15;
/// Largest per-frame change of a lighting coefficient.
pub const LIGHTING_STEP: f32 = 0.1;
pub const MAX_TRAJECTORY_LEN: usize = 256;

/// One identity moving through a sequence of states: the synthetic stand-in
/// for a video clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub identity: IdentityParams,
    pub states: Vec<StateParams>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn params(&self, frame: usize) -> FaceParams {
        FaceParams::new(self.identity, self.states[frame])
    }
}

fn walk<R: Rng, const N: usize>(
    rng: &mut R,
    from: &[f32; N],
    bounds: &[(f32, f32); N],
    step: f32,
) -> [f32; N] {
    let normal = Normal::new(0.0f32, step / 2.0).expect("positive sigma");
    let mut out = *from;
    for (v, (lo, hi)) in out.iter_mut().zip(bounds) {
        let delta = normal.sample(rng).clamp(-step, step);
        *v = (*v + delta).clamp(*lo, *hi);
    }
    out
}

/// Identity from `sample_identity(identity_seed)`, first frame from
/// `sample_state`, then a clipped Gaussian random walk kept inside the valid
/// ranges. Lighting steps that break the positivity invariant are redrawn;
/// if none is found the lighting holds still for that frame.
pub fn generate_trajectory(identity_seed: u64, length: usize) -> Result<Trajectory> {
    if !(2..=MAX_TRAJECTORY_LEN).contains(&length) {
        return Err(Error::contract(format!(
            "trajectory length {length} outside 2..={MAX_TRAJECTORY_LEN}"
        )));
    }
    let identity = sample_identity(identity_seed);
    let first = sample_state(&identity, identity_seed);
    let mut rng = stream(identity_seed, Stream::Walk);
    let mut states = Vec::with_capacity(length);
    states.push(first);
    for _ in 1..length {
        let prev = *states.last().expect("non-empty");
        let mut next = StateParams {
            expression: walk(&mut rng, &prev.expression, &EXPRESSION_BOUNDS, MOTION_STEP),
            pose: walk(&mut rng, &prev.pose, &POSE_BOUNDS, MOTION_STEP),
            lighting: prev.lighting,
        };
        let mut found = false;
        for _ in 0..MAX_LIGHTING_ATTEMPTS {
            next.lighting = walk(&mut rng, &prev.lighting, &LIGHTING_BOUNDS, LIGHTING_STEP);
            if lighting_is_valid(&identity, &next) {
                found = true;
                break;
            }
        }
        if !found {
            next.lighting = prev.lighting;
        }
        states.push(next);
    }
    Ok(Trajectory {
        identity,
        states,
        seed: identity_seed,
    })
}
