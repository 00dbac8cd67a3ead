use serde::{Deserialize, Serialize};

pub const SHAPE_DIM: usize = 8;
pub const ALBEDO_DIM: usize = 6;
pub const BACKGROUND_DIM: usize = 3;
pub const EXPRESSION_DIM: usize = 4;
pub const POSE_DIM: usize = 3;
pub const LIGHTING_DIM: usize = 9;

pub const IDENTITY_DIM: usize = SHAPE_DIM + ALBEDO_DIM + BACKGROUND_DIM;
pub const STATE_DIM: usize = EXPRESSION_DIM + POSE_DIM + LIGHTING_DIM;
/// Length of a flattened [`FaceParams`] in field order.
pub const PARAM_DIM: usize = IDENTITY_DIM + STATE_DIM;

/// Indices into [`IdentityParams::shape`].
pub mod shape_idx {
    pub const RADIUS_X: usize = 0;
    pub const RADIUS_Y: usize = 1;
    pub const RADIUS_Z: usize = 2;
    pub const EYE_SPACING: usize = 3;
    pub const EYE_HEIGHT: usize = 4;
    pub const NOSE_SIZE: usize = 5;
    pub const MOUTH_WIDTH: usize = 6;
    pub const HAIRLINE: usize = 7;
}

/// Indices into [`StateParams::expression`].
pub mod expr_idx {
    pub const MOUTH_CURVATURE: usize = 0;
    pub const MOUTH_OPENNESS: usize = 1;
    pub const BROW_RAISE: usize = 2;
    pub const EYE_OPENNESS: usize = 3;
}

pub const SHAPE_BOUNDS: [(f32, f32); SHAPE_DIM] = [
    (0.55, 0.95),
    (0.55, 0.95),
    (0.55, 0.95),
    (0.25, 0.45),
    (0.10, 0.35),
    (0.06, 0.16),
    (0.20, 0.45),
    (0.45, 0.80),
];

pub const ALBEDO_BOUNDS: [(f32, f32); ALBEDO_DIM] = [
    (0.2, 0.9),
    (0.2, 0.9),
    (0.2, 0.9),
    (0.05, 0.8),
    (0.05, 0.8),
    (0.05, 0.8),
];

pub const BACKGROUND_BOUNDS: [(f32, f32); BACKGROUND_DIM] = [(0.0, 1.0); 3];

pub const EXPRESSION_BOUNDS: [(f32, f32); EXPRESSION_DIM] =
    [(-1.0, 1.0), (0.0, 1.0), (-1.0, 1.0), (0.2, 1.0)];

pub const POSE_LIMIT: f32 = 0.6;
pub const POSE_BOUNDS: [(f32, f32); POSE_DIM] = [(-POSE_LIMIT, POSE_LIMIT); 3];

pub const LIGHTING_BOUNDS: [(f32, f32); LIGHTING_DIM] = [
    (0.5, 1.2),
    (-0.4, 0.4),
    (-0.4, 0.4),
    (-0.4, 0.4),
    (-0.4, 0.4),
    (-0.4, 0.4),
    (-0.4, 0.4),
    (-0.4, 0.4),
    (-0.4, 0.4),
];

/// Per-identity constants: head geometry, feature layout and colours.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    /// Ellipsoid radii, eye spacing, eye height, nose size, mouth width,
    /// hair-line height. See [`shape_idx`].
    pub shape: [f32; SHAPE_DIM],
    /// Skin RGB followed by hair RGB.
    pub albedo: [f32; ALBEDO_DIM],
    pub background: [f32; BACKGROUND_DIM],
}

/// Per-frame parameters: expression, head pose and SH lighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateParams {
    /// Mouth curvature, mouth openness, brow raise, eye openness.
    pub expression: [f32; EXPRESSION_DIM],
    /// Yaw, pitch, roll in radians.
    pub pose: [f32; POSE_DIM],
    /// Real SH coefficients, shared by the three colour channels.
    pub lighting: [f32; LIGHTING_DIM],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    pub identity: IdentityParams,
    pub state: StateParams,
}

impl IdentityParams {
    pub fn skin(&self) -> [f32; 3] {
        [self.albedo[0], self.albedo[1], self.albedo[2]]
    }

    pub fn hair(&self) -> [f32; 3] {
        [self.albedo[3], self.albedo[4], self.albedo[5]]
    }

    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(IDENTITY_DIM);
        v.extend_from_slice(&self.shape);
        v.extend_from_slice(&self.albedo);
        v.extend_from_slice(&self.background);
        v
    }

    pub fn from_slice(v: &[f32]) -> Self {
        assert_eq!(v.len(), IDENTITY_DIM, "identity vector length");
        let mut out = IdentityParams {
            shape: [0.0; SHAPE_DIM],
            albedo: [0.0; ALBEDO_DIM],
            background: [0.0; BACKGROUND_DIM],
        };
        out.shape.copy_from_slice(&v[..SHAPE_DIM]);
        out.albedo
            .copy_from_slice(&v[SHAPE_DIM..SHAPE_DIM + ALBEDO_DIM]);
        out.background
            .copy_from_slice(&v[SHAPE_DIM + ALBEDO_DIM..]);
        out
    }

    pub fn in_bounds(&self) -> bool {
        within(&self.to_vec(), &identity_bounds())
    }
}

impl StateParams {
    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(STATE_DIM);
        v.extend_from_slice(&self.expression);
        v.extend_from_slice(&self.pose);
        v.extend_from_slice(&self.lighting);
        v
    }

    pub fn from_slice(v: &[f32]) -> Self {
        assert_eq!(v.len(), STATE_DIM, "state vector length");
        let mut out = StateParams {
            expression: [0.0; EXPRESSION_DIM],
            pose: [0.0; POSE_DIM],
            lighting: [0.0; LIGHTING_DIM],
        };
        out.expression.copy_from_slice(&v[..EXPRESSION_DIM]);
        out.pose
            .copy_from_slice(&v[EXPRESSION_DIM..EXPRESSION_DIM + POSE_DIM]);
        out.lighting
            .copy_from_slice(&v[EXPRESSION_DIM + POSE_DIM..]);
        out
    }

    pub fn in_bounds(&self) -> bool {
        within(&self.to_vec(), &state_bounds())
    }
}

impl FaceParams {
    pub fn new(identity: IdentityParams, state: StateParams) -> Self {
        FaceParams { identity, state }
    }

    /// Flattened in field order: shape, albedo, background, expression,
    /// pose, lighting.
    pub fn to_vec(&self) -> Vec<f32> {
        let mut v = self.identity.to_vec();
        v.extend(self.state.to_vec());
        v
    }

    pub fn from_slice(v: &[f32]) -> Self {
        assert_eq!(v.len(), PARAM_DIM, "face parameter vector length");
        FaceParams {
            identity: IdentityParams::from_slice(&v[..IDENTITY_DIM]),
            state: StateParams::from_slice(&v[IDENTITY_DIM..]),
        }
    }

    pub fn in_bounds(&self) -> bool {
        self.identity.in_bounds() && self.state.in_bounds()
    }
}

pub fn identity_bounds() -> Vec<(f32, f32)> {
    SHAPE_BOUNDS
        .iter()
        .chain(ALBEDO_BOUNDS.iter())
        .chain(BACKGROUND_BOUNDS.iter())
        .copied()
        .collect()
}

pub fn state_bounds() -> Vec<(f32, f32)> {
    EXPRESSION_BOUNDS
        .iter()
        .chain(POSE_BOUNDS.iter())
        .chain(LIGHTING_BOUNDS.iter())
        .copied()
        .collect()
}

/// Bounds for every entry of [`FaceParams::to_vec`].
pub fn param_bounds() -> Vec<(f32, f32)> {
    let mut b = identity_bounds();
    b.extend(state_bounds());
    b
}

fn within(v: &[f32], bounds: &[(f32, f32)]) -> bool {
    v.iter()
        .zip(bounds)
        .all(|(x, (lo, hi))| x.is_finite() && *x >= *lo && *x <= *hi)
}
