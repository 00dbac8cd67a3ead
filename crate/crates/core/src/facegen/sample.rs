use rand::Rng;

use super::params::*;
use super::render::positive_irradiance_fraction;
use crate::rng::{stream, Stream};

/// Resolution at which the lighting positivity check is evaluated.
const POSITIVITY_RES: usize = 64;
/// Accepted positive-irradiance fraction. Slightly above one half so the
/// invariant still holds after resampling the geometry at other resolutions.
pub const POSITIVITY_THRESHOLD: f64 = 0.55;
pub const MAX_LIGHTING_ATTEMPTS: usize = 100;

fn uniform<R: Rng, const N: usize>(rng: &mut R, bounds: &[(f32, f32); N]) -> [f32; N] {
    let mut out = [0.0f32; N];
    for (v, (lo, hi)) in out.iter_mut().zip(bounds) {
        *v = rng.random_range(*lo..=*hi);
    }
    out
}

/// Deterministic identity draw, uniform within every field's range.
pub fn sample_identity(seed: u64) -> IdentityParams {
    let mut rng = stream(seed, Stream::Identity);
    IdentityParams {
        shape: uniform(&mut rng, &SHAPE_BOUNDS),
        albedo: uniform(&mut rng, &ALBEDO_BOUNDS),
        background: uniform(&mut rng, &BACKGROUND_BOUNDS),
    }
}

pub fn lighting_is_valid(identity: &IdentityParams, state: &StateParams) -> bool {
    positive_irradiance_fraction(identity, state, POSITIVITY_RES) >= POSITIVITY_THRESHOLD
}

/// Draws lighting until the positivity invariant holds. After
/// [`MAX_LIGHTING_ATTEMPTS`] failures the last draw keeps only its DC term,
/// which is positive everywhere.
pub fn sample_lighting<R: Rng>(
    rng: &mut R,
    identity: &IdentityParams,
    partial: &StateParams,
) -> [f32; LIGHTING_DIM] {
    let mut state = *partial;
    for _ in 0..MAX_LIGHTING_ATTEMPTS {
        state.lighting = uniform(rng, &LIGHTING_BOUNDS);
        if lighting_is_valid(identity, &state) {
            return state.lighting;
        }
    }
    let mut dc = [0.0; LIGHTING_DIM];
    dc[0] = state.lighting[0];
    dc
}

/// Deterministic state draw for a given identity.
pub fn sample_state(identity: &IdentityParams, seed: u64) -> StateParams {
    let mut rng = stream(seed, Stream::State);
    let mut state = StateParams {
        expression: uniform(&mut rng, &EXPRESSION_BOUNDS),
        pose: uniform(&mut rng, &POSE_BOUNDS),
        lighting: [0.0; LIGHTING_DIM],
    };
    state.lighting = sample_lighting(&mut rng, identity, &state);
    state
}

/// Uniform draw of just the expression group.
pub fn sample_expression(seed: u64) -> [f32; EXPRESSION_DIM] {
    uniform(&mut stream(seed, Stream::State), &EXPRESSION_BOUNDS)
}

/// Uniform draw of just the pose group.
pub fn sample_pose(seed: u64) -> [f32; POSE_DIM] {
    let mut rng = stream(seed, Stream::State);
    let _ = uniform(&mut rng, &EXPRESSION_BOUNDS);
    uniform(&mut rng, &POSE_BOUNDS)
}
