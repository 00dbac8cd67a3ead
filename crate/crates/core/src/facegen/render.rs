//! Orthographic ray casting of the parametric head.
//!
//! Pixel centres map to `x, y ∈ [-1, 1]` (half-image units, `y` up). Each
//! pixel shoots a ray parallel to the z axis and keeps the ellipsoid hit
//! closest to the viewer at `+z`. The head frame is the unrotated ellipsoid;
//! texture coordinates are `uv = (x'/r_x, y'/r_y)` in that frame.

use super::params::{expr_idx, shape_idx, FaceParams, IdentityParams, StateParams};
use super::sh;
use crate::raster::Raster;
use crate::{Error, Result};

pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [16, 32, 64, 128];

pub const EYE_SIGMA: f64 = 0.06;
pub const MOUTH_SIGMA: f64 = 0.04;
pub const BROW_SIGMA: f64 = 0.03;
/// Height of the mouth centre line in uv units.
pub const MOUTH_HEIGHT: f64 = -0.42;
/// Nose centre in uv units.
pub const NOSE_HEIGHT: f64 = -0.08;
/// Softness of the hair line and of the nose disk edge.
const EDGE_SOFTNESS: f64 = 0.02;
/// The off-face hair halo is the ellipsoid inflated by this factor.
const HALO_SCALE: f64 = 1.12;
/// Halo pixels below this head-frame height show background instead.
const HALO_MIN_V: f64 = -0.2;

const EYE_COLOR: [f64; 3] = [0.05, 0.05, 0.08];
const LIP_COLOR: [f64; 3] = [0.65, 0.25, 0.28];
const MOUTH_INTERIOR: [f64; 3] = [0.15, 0.05, 0.05];

/// All planes produced for one set of face parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderBundle {
    /// Shaded face, hair halo and background.
    pub image: Raster,
    /// Unit normals remapped to `[0, 1]`; 0.5 grey off the face.
    pub normals: Raster,
    /// Face albedo; black off the face.
    pub albedo: Raster,
    /// `albedo ⊙ clamp(irradiance, 0, 1)`; black off the face.
    pub shaded: Raster,
    /// Unclamped irradiance per pixel (zero off the face).
    pub irradiance: Raster,
    pub mask: Vec<bool>,
}

impl RenderBundle {
    pub fn res(&self) -> usize {
        self.image.res
    }

    pub fn face_pixels(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Rotation `R = R_y(yaw) · R_x(pitch) · R_z(roll)`.
pub fn rotation(pose: &[f32; 3]) -> [[f64; 3]; 3] {
    let (yaw, pitch, roll) = (pose[0] as f64, pose[1] as f64, pose[2] as f64);
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    matmul(&matmul(&ry, &rx), &rz)
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Pixel-centre coordinate of row/column index `i` at resolution `res`.
#[inline]
pub fn pixel_coord(i: usize, res: usize) -> f64 {
    (2 * i + 1) as f64 / res as f64 - 1.0
}

/// A rotated ellipsoid prepared for repeated ray queries.
struct Ellipsoid {
    rot: [[f64; 3]; 3],
    radii: [f64; 3],
    /// `M = R · diag(1/r²) · Rᵀ`.
    m: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn new(rot: [[f64; 3]; 3], radii: [f64; 3]) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3)
                    .map(|k| rot[i][k] * rot[j][k] / (radii[k] * radii[k]))
                    .sum();
            }
        }
        Ellipsoid { rot, radii, m }
    }

    /// Front-most hit of the ray through `(x, y)`.
    fn hit(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let m = &self.m;
        let a = m[2][2];
        let b = 2.0 * (m[0][2] * x + m[1][2] * y);
        let c = m[0][0] * x * x + 2.0 * m[0][1] * x * y + m[1][1] * y * y - 1.0;
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return None;
        }
        let z = (-b + disc.sqrt()) / (2.0 * a);
        Some([x, y, z])
    }

    fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        mat_t_vec(&self.rot, p)
    }

    /// World-space unit normal at a surface point.
    fn normal(&self, p: [f64; 3]) -> [f64; 3] {
        let local = self.to_local(p);
        let g = [
            local[0] / (self.radii[0] * self.radii[0]),
            local[1] / (self.radii[1] * self.radii[1]),
            local[2] / (self.radii[2] * self.radii[2]),
        ];
        let n = mat_vec(&self.rot, g);
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        [n[0] / len, n[1] / len, n[2] / len]
    }
}

fn head(identity: &IdentityParams, state: &StateParams, scale: f64) -> Ellipsoid {
    let s = &identity.shape;
    Ellipsoid::new(
        rotation(&state.pose),
        [
            s[shape_idx::RADIUS_X] as f64 * scale,
            s[shape_idx::RADIUS_Y] as f64 * scale,
            s[shape_idx::RADIUS_Z] as f64 * scale,
        ],
    )
}

pub fn check_resolution(res: usize) -> Result<()> {
    if SUPPORTED_RESOLUTIONS.contains(&res) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "resolution {res} not in {SUPPORTED_RESOLUTIONS:?}"
        )))
    }
}

#[inline]
fn gauss(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn lerp3(a: [f64; 3], b: [f64; 3], w: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * w,
        a[1] + (b[1] - a[1]) * w,
        a[2] + (b[2] - a[2]) * w,
    ]
}

/// Face albedo at texture coordinate `(u, v)`.
///
/// Skin base, then soft masks blended in order: nose, eyes, brows, mouth,
/// hair above the hair line. Each blend is a convex combination, so the
/// result stays inside the colour cube.
pub fn albedo_at(identity: &IdentityParams, state: &StateParams, u: f64, v: f64) -> [f64; 3] {
    let s = &identity.shape;
    let e = &state.expression;
    let skin = identity.skin().map(|c| c as f64);
    let hair = identity.hair().map(|c| c as f64);

    let eye_dx = s[shape_idx::EYE_SPACING] as f64;
    let eye_y = s[shape_idx::EYE_HEIGHT] as f64;
    let nose = s[shape_idx::NOSE_SIZE] as f64;
    let mouth_w = s[shape_idx::MOUTH_WIDTH] as f64;
    let hairline = s[shape_idx::HAIRLINE] as f64;

    let mut a = skin;

    let nr = (u * u + (v - NOSE_HEIGHT) * (v - NOSE_HEIGHT)).sqrt();
    let nose_w = 0.5 * sigmoid((nose - nr) / EDGE_SOFTNESS);
    a = lerp3(a, skin.map(|c| 0.75 * c), nose_w);

    let openness = e[expr_idx::EYE_OPENNESS] as f64;
    let eye_sy = EYE_SIGMA * openness;
    for side in [-1.0, 1.0] {
        let dx = u - side * eye_dx;
        let dy = v - eye_y;
        let w = (-(dx * dx) / (2.0 * EYE_SIGMA * EYE_SIGMA) - (dy * dy) / (2.0 * eye_sy * eye_sy)).exp();
        a = lerp3(a, EYE_COLOR, w);
    }

    let brow_y = eye_y + 0.14 + 0.06 * e[expr_idx::BROW_RAISE] as f64;
    let brow_color = hair.map(|c| 0.7 * c);
    for side in [-1.0, 1.0] {
        let dx = ((u - side * eye_dx).abs() - 0.08).max(0.0);
        let dy = v - brow_y;
        let w = gauss(dy * dy, BROW_SIGMA) * gauss(dx * dx, BROW_SIGMA);
        a = lerp3(a, brow_color, w);
    }

    let mouth_open = e[expr_idx::MOUTH_OPENNESS] as f64;
    let curve = MOUTH_HEIGHT + 0.1 * e[expr_idx::MOUTH_CURVATURE] as f64 * (u / mouth_w).powi(2);
    let band = MOUTH_SIGMA * (1.0 + 1.5 * mouth_open);
    let dx = (u.abs() - mouth_w).max(0.0);
    let dy = v - curve;
    let w = gauss(dy * dy, band) * gauss(dx * dx, MOUTH_SIGMA);
    a = lerp3(a, lerp3(LIP_COLOR, MOUTH_INTERIOR, mouth_open), w);

    let hair_w = sigmoid((v - hairline) / EDGE_SOFTNESS);
    lerp3(a, hair, hair_w)
}

/// Renders image, normals, albedo, shading and mask.
pub fn render_face(params: &FaceParams, res: usize) -> Result<RenderBundle> {
    check_resolution(res)?;
    let id = &params.identity;
    let st = &params.state;
    let face = head(id, st, 1.0);
    let halo = head(id, st, HALO_SCALE);
    let bg = id.background;
    let hair = id.hair();

    let n = res * res;
    let mut image = vec![0.0f32; n * 3];
    let mut normals = vec![0.5f32; n * 3];
    let mut albedo = vec![0.0f32; n * 3];
    let mut shaded = vec![0.0f32; n * 3];
    let mut irr = vec![0.0f32; n];
    let mut mask = vec![false; n];

    for row in 0..res {
        let y = -pixel_coord(row, res);
        for col in 0..res {
            let x = pixel_coord(col, res);
            let px = row * res + col;
            let o = px * 3;
            match face.hit(x, y) {
                Some(p) => {
                    mask[px] = true;
                    let nrm = face.normal(p);
                    let local = face.to_local(p);
                    let u = local[0] / face.radii[0];
                    let v = local[1] / face.radii[1];
                    let alb = albedo_at(id, st, u, v);
                    let e = sh::irradiance(&st.lighting, nrm) as f32;
                    let shade = e.clamp(0.0, 1.0);
                    irr[px] = e;
                    for c in 0..3 {
                        normals[o + c] = ((nrm[c] + 1.0) * 0.5) as f32;
                        let a = alb[c] as f32;
                        albedo[o + c] = a;
                        shaded[o + c] = a * shade;
                        image[o + c] = a * shade;
                    }
                }
                None => {
                    let color = match halo.hit(x, y) {
                        Some(p) if halo.to_local(p)[1] / halo.radii[1] > HALO_MIN_V => hair,
                        _ => bg,
                    };
                    image[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }

    Ok(RenderBundle {
        image: Raster::new(res, 3, image)?,
        normals: Raster::new(res, 3, normals)?,
        albedo: Raster::new(res, 3, albedo)?,
        shaded: Raster::new(res, 3, shaded)?,
        irradiance: Raster::new(res, 1, irr)?,
        mask,
    })
}

/// Fraction of face pixels with strictly positive (unclamped) irradiance.
/// Geometry-only, so much cheaper than a full render.
pub fn positive_irradiance_fraction(identity: &IdentityParams, state: &StateParams, res: usize) -> f64 {
    let face = head(identity, state, 1.0);
    let mut hits = 0usize;
    let mut positive = 0usize;
    for row in 0..res {
        let y = -pixel_coord(row, res);
        for col in 0..res {
            let x = pixel_coord(col, res);
            if let Some(p) = face.hit(x, y) {
                hits += 1;
                if sh::irradiance(&state.lighting, face.normal(p)) > 0.0 {
                    positive += 1;
                }
            }
        }
    }
    if hits == 0 {
        0.0
    } else {
        positive as f64 / hits as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facegen::sample::{sample_identity, sample_state};

    fn params(seed: u64) -> FaceParams {
        let id = sample_identity(seed);
        FaceParams::new(id, sample_state(&id, seed + 1000))
    }

    #[test]
    fn dc_lighting_is_constant_shading() {
        let mut p = params(3);
        p.state.lighting = [0.0; 9];
        p.state.lighting[0] = 1.0;
        p.state.pose = [0.3, -0.2, 0.1];
        let b = render_face(&p, 32).unwrap();
        for px in 0..b.mask.len() {
            if b.mask[px] {
                for c in 0..3 {
                    let a = b.albedo.data[px * 3 + c];
                    let expect = a * (sh::SH_C0 as f32);
                    assert!((b.shaded.data[px * 3 + c] - expect).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn frontal_normals_are_mirror_symmetric() {
        let mut p = params(11);
        p.state.pose = [0.0; 3];
        let res = 64;
        let n = render_face(&p, res).unwrap().normals;
        for r in 0..res {
            for c in 0..res {
                let m = res - 1 - c;
                assert!((n.at(r, c, 0) - (1.0 - n.at(r, m, 0))).abs() < 1e-4);
                assert!((n.at(r, c, 1) - n.at(r, m, 1)).abs() < 1e-4);
                assert!((n.at(r, c, 2) - n.at(r, m, 2)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn lighting_changes_only_the_shaded_plane() {
        let a = params(5);
        let mut b = a;
        b.state.lighting[2] = -b.state.lighting[2] + 0.1;
        let ra = render_face(&a, 32).unwrap();
        let rb = render_face(&b, 32).unwrap();
        assert_eq!(ra.normals, rb.normals);
        assert_eq!(ra.albedo, rb.albedo);
        assert_ne!(ra.shaded, rb.shaded);
    }

    #[test]
    fn rejects_unsupported_resolution() {
        assert!(render_face(&params(0), 48).is_err());
    }

    #[test]
    fn render_is_pure() {
        let p = params(9);
        assert_eq!(render_face(&p, 64).unwrap(), render_face(&p, 64).unwrap());
    }
}
