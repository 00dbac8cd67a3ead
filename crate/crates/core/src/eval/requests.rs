//! Single-attribute rig requests.
//!
//! Each request starts from a reference state of a held-out identity and
//! replaces exactly one attribute group with a fresh draw. A fresh draw that
//! breaks the lighting positivity invariant under the new geometry is
//! redrawn.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_container, write_container, Quadruplet};
use crate::facegen::render::render_face;
use crate::facegen::sample::{lighting_is_valid, sample_expression, sample_lighting, sample_pose};
use crate::facegen::{sample_identity, sample_state, FaceParams};
use crate::rng::{mix, substream, Stream};
use crate::{Error, Result};

const MAX_REDRAWS: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Light,
    Shape,
    Expression,
    Pose,
}

impl Attribute {
    pub const ALL: [Attribute; 4] = [Attribute::Light, Attribute::Shape, Attribute::Expression, Attribute::Pose];

    pub fn name(&self) -> &'static str {
        match self {
            Attribute::Light => "light",
            Attribute::Shape => "shape",
            Attribute::Expression => "expression",
            Attribute::Pose => "pose",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigRequest {
    pub index: u64,
    pub attribute: Attribute,
    /// Reference and target renders and controls; `x_tgt` is the
    /// ground-truth render of the target parameters.
    pub quad: Quadruplet,
    /// Pixels off the face in both reference and target renders.
    pub off_face: Vec<bool>,
}

impl RigRequest {
    pub fn params_ref(&self) -> &FaceParams {
        &self.quad.meta.params_ref
    }

    pub fn params_tgt(&self) -> &FaceParams {
        &self.quad.meta.params_tgt
    }

    pub fn res(&self) -> usize {
        self.quad.res()
    }
}

fn vary(reference: &FaceParams, attribute: Attribute, fresh: u64) -> FaceParams {
    let mut t = *reference;
    match attribute {
        Attribute::Light => {
            let mut rng = substream(fresh, Stream::Eval, 0);
            t.state.lighting = sample_lighting(&mut rng, &t.identity, &t.state);
        }
        Attribute::Shape => t.identity.shape = sample_identity(fresh).shape,
        Attribute::Expression => t.state.expression = sample_expression(fresh),
        Attribute::Pose => t.state.pose = sample_pose(fresh),
    }
    t
}

/// The target for request `index`: the reference with one group redrawn.
pub fn target_params(reference: &FaceParams, attribute: Attribute, seed: u64, index: u64) -> FaceParams {
    let mut last = *reference;
    for k in 0..MAX_REDRAWS {
        last = vary(reference, attribute, mix(mix(seed, index), k + 1));
        if lighting_is_valid(&last.identity, &last.state) {
            return last;
        }
    }
    last
}

/// Builds `per_attribute` requests for every attribute, cycling through the
/// given identity seeds. Indices run attribute-major.
pub fn make_requests(identity_seeds: &[u64], per_attribute: usize, res: usize, seed: u64) -> Result<Vec<RigRequest>> {
    if identity_seeds.is_empty() {
        return Err(Error::Config("request set needs at least one identity".into()));
    }
    let mut out = Vec::with_capacity(4 * per_attribute);
    for (a, attribute) in Attribute::ALL.into_iter().enumerate() {
        for j in 0..per_attribute {
            let index = (a * per_attribute + j) as u64;
            let id_seed = identity_seeds[j % identity_seeds.len()];
            let id = sample_identity(id_seed);
            let reference = FaceParams::new(id, sample_state(&id, mix(seed, 2 * index)));
            let target = target_params(&reference, attribute, seed, index);
            out.push(build_request(index, attribute, id_seed, reference, target, res)?);
        }
    }
    Ok(out)
}

pub fn build_request(
    index: u64,
    attribute: Attribute,
    identity_seed: u64,
    reference: FaceParams,
    target: FaceParams,
    res: usize,
) -> Result<RigRequest> {
    let quad = Quadruplet::from_params(identity_seed, (0, 1), reference, target, res)?;
    let mr = render_face(&reference, res)?.mask;
    let mt = render_face(&target, res)?.mask;
    let off_face = mr.iter().zip(&mt).map(|(a, b)| !a && !b).collect();
    Ok(RigRequest {
        index,
        attribute,
        quad,
        off_face,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Annotation {
    index: u64,
    attribute: Attribute,
}

/// Writes the requests as a quadruplet container plus a JSON side file
/// (`<path>.attributes.json`) naming each record's varied attribute.
pub fn write_requests(path: &Path, requests: &[RigRequest]) -> Result<()> {
    let res = requests.first().map_or(16, |r| r.res());
    let quads: Vec<Quadruplet> = requests.iter().map(|r| r.quad.clone()).collect();
    write_container(path, res, &quads)?;
    let ann: Vec<Annotation> = requests
        .iter()
        .map(|r| Annotation {
            index: r.index,
            attribute: r.attribute,
        })
        .collect();
    let side = annotation_path(path);
    let json = serde_json::to_vec_pretty(&ann).map_err(|e| Error::format(None, e.to_string()))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_requests(path: &Path) -> Result<Vec<RigRequest>> {
    let (_, quads) = read_container(path)?;
    let side = annotation_path(path);
    let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let ann: Vec<Annotation> =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(None, format!("annotations: {e}")))?;
    if ann.len() != quads.len() {
        return Err(Error::format(None, "annotation count differs from record count"));
    }
    quads
        .into_iter()
        .zip(ann)
        .map(|(q, a)| {
            build_request(
                a.index,
                a.attribute,
                q.meta.identity_seed,
                q.meta.params_ref,
                q.meta.params_tgt,
                q.res(),
            )
        })
        .collect()
}

fn annotation_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".attributes.json");
    s.into()
}
