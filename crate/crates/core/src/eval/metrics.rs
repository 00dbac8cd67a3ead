//! Re-inference error and appearance consistency.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::requests::{Attribute, RigRequest};
use crate::facegen::fit::{lighting_rmse, normal_map_rmse};
use crate::facegen::{fit_params_from, FitOptions, FitScope, Observation};
use crate::raster::Raster;
use crate::rng::mix;
use crate::{Error, Result};

/// Largest fraction of non-converged fits an attribute may exclude before
/// its metric is flagged invalid.
pub const EXCLUSION_CAP: f64 = 0.2;

/// Fitting parameters for re-inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub starts: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { starts: 8, seed: 0x5EED }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeError {
    /// Mean over converged fits: normal-map RMSE ×100, or raw SH RMSE for
    /// lighting.
    pub mean: Option<f64>,
    pub count: usize,
    pub excluded: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReinferenceTable {
    pub per_attribute: BTreeMap<Attribute, AttributeError>,
    /// Mean of the valid attribute means.
    pub average: Option<f64>,
    pub valid: bool,
}

/// Per-request outcome: `None` when the fit did not converge.
pub fn reinference_errors(generated: &[Raster], requests: &[RigRequest], fit: &FitConfig) -> Result<Vec<Option<f64>>> {
    if generated.len() != requests.len() {
        return Err(Error::contract(format!(
            "{} images for {} requests",
            generated.len(),
            requests.len()
        )));
    }
    generated
        .par_iter()
        .zip(requests)
        .map(|(img, req)| {
            let reference = *req.params_ref();
            let id = reference.identity;
            let seeds: Vec<u64> = (0..fit.starts as u64).map(|k| mix(mix(fit.seed, req.index), k)).collect();
            let opts = FitOptions::default();
            // The reference state is known to the protocol and is tried first.
            let mut starts = vec![reference];
            let scope = match req.attribute {
                Attribute::Shape => {
                    // Shape alone first: with the state free as well the
                    // silhouette leaves many shallow minima.
                    let staged = fit_params_from(Observation::Image(img), &[reference], &seeds, FitScope::Shape(reference), &opts)?;
                    starts.insert(0, staged.params);
                    FitScope::ShapeAndState(id)
                }
                _ => FitScope::State(id),
            };
            let res = fit_params_from(Observation::Image(img), &starts, &seeds, scope, &opts)?;
            if !res.converged {
                return Ok(None);
            }
            let target = req.params_tgt();
            Ok(Some(match req.attribute {
                Attribute::Light => lighting_rmse(&res.params.state, &target.state),
                _ => 100.0 * normal_map_rmse(target, &res.params, img.res)?,
            }))
        })
        .collect()
}

/// Aggregates per-request errors into the per-attribute table.
pub fn summarise(errors: &[Option<f64>], requests: &[RigRequest]) -> ReinferenceTable {
    let mut per_attribute = BTreeMap::new();
    for attribute in Attribute::ALL {
        let vals: Vec<Option<f64>> = errors
            .iter()
            .zip(requests)
            .filter(|(_, r)| r.attribute == attribute)
            .map(|(e, _)| *e)
            .collect();
        if vals.is_empty() {
            continue;
        }
        let ok: Vec<f64> = vals.iter().flatten().copied().collect();
        let excluded = vals.len() - ok.len();
        let valid = !ok.is_empty() && excluded as f64 <= EXCLUSION_CAP * vals.len() as f64;
        per_attribute.insert(
            attribute,
            AttributeError {
                mean: (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
                count: vals.len(),
                excluded,
                valid,
            },
        );
    }
    let valid = !per_attribute.is_empty() && per_attribute.values().all(|a| a.valid);
    let means: Vec<f64> = per_attribute.values().filter(|a| a.valid).filter_map(|a| a.mean).collect();
    ReinferenceTable {
        average: (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64),
        per_attribute,
        valid,
    }
}

/// Fits every generated image and tabulates the error against its request.
pub fn reinference_error(generated: &[Raster], requests: &[RigRequest], fit: &FitConfig) -> Result<ReinferenceTable> {
    Ok(summarise(&reinference_errors(generated, requests, fit)?, requests))
}

/// Mean squared error over the masked pixels of every pair, all channels.
/// An empty mask is an error.
pub fn appearance_consistency(generated: &[Raster], references: &[Raster], masks: &[Vec<bool>]) -> Result<f64> {
    if generated.len() != references.len() || generated.len() != masks.len() {
        return Err(Error::contract("appearance inputs differ in length"));
    }
    if generated.is_empty() {
        return Err(Error::contract("appearance consistency of an empty set"));
    }
    let mut total = 0.0;
    for (i, ((g, r), m)) in generated.iter().zip(references).zip(masks).enumerate() {
        g.check_same_shape(r)?;
        if m.len() != g.pixels() {
            return Err(Error::shape(format!("mask {i} has {} pixels, image {}", m.len(), g.pixels())));
        }
        let n = m.iter().filter(|v| **v).count();
        if n == 0 {
            return Err(Error::contract(format!("appearance mask {i} is empty")));
        }
        let c = g.channels;
        let mut s = 0.0;
        for (px, _) in m.iter().enumerate().filter(|(_, v)| **v) {
            for ch in 0..c {
                let d = (g.data[px * c + ch] - r.data[px * c + ch]) as f64;
                s += d * d;
            }
        }
        total += s / (n * c) as f64;
    }
    Ok(total / generated.len() as f64)
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
