//! PNG plots: guidance sweep curves and guidance-delta grids.

use serde::{Deserialize, Serialize};

use super::harness::{generate_recorded, SamplingConfig, SweepTable};
use super::requests::RigRequest;
use crate::diffusion::{GuidanceMode, GuidanceSpec, TrajectoryRecord};
use crate::nets::ModelState;
use crate::raster::{Canvas, Raster};
use crate::{Error, Result};

const PALETTE: [[f32; 3]; 6] = [
    [0.85, 0.10, 0.10],
    [0.10, 0.35, 0.85],
    [0.10, 0.60, 0.20],
    [0.85, 0.55, 0.05],
    [0.55, 0.15, 0.70],
    [0.30, 0.30, 0.30],
];
const WHITE: [f32; 3] = [1.0, 1.0, 1.0];
const AXIS: [f32; 3] = [0.0, 0.0, 0.0];

pub fn mode_color(i: usize) -> [f32; 3] {
    PALETTE[i % PALETTE.len()]
}

/// Average re-inference error against `w`, one polyline per mode in
/// `PALETTE` order, with a legend of colour swatches in the top-right
/// corner. Missing values break the line.
pub fn sweep_plot(table: &SweepTable) -> Canvas {
    let (w, h, m) = (480usize, 320usize, 40.0f64);
    let mut c = Canvas::new(w, h, WHITE);
    let vals: Vec<f64> = table.rows.iter().flatten().filter_map(|t| t.average).collect();
    let (lo, hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let (lo, hi) = if vals.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let (x_lo, x_hi) = match (table.w_grid.first(), table.w_grid.last()) {
        (Some(a), Some(b)) if b > a => (*a, *b),
        (Some(a), _) => (*a - 0.5, *a + 0.5),
        _ => (0.0, 1.0),
    };
    let px = |x: f64| m + (x - x_lo) / (x_hi - x_lo) * (w as f64 - 2.0 * m);
    let py = |y: f64| h as f64 - m - (y - lo) / (hi - lo) * (h as f64 - 2.0 * m);
    c.line(m, h as f64 - m, w as f64 - m, h as f64 - m, AXIS, 1);
    c.line(m, m, m, h as f64 - m, AXIS, 1);
    for x in &table.w_grid {
        c.line(px(*x), h as f64 - m, px(*x), h as f64 - m + 5.0, AXIS, 1);
    }
    for (i, row) in table.rows.iter().enumerate() {
        let color = mode_color(i);
        let pts: Vec<Option<(f64, f64)>> = row
            .iter()
            .zip(&table.w_grid)
            .map(|(t, x)| t.average.map(|y| (px(*x), py(y))))
            .collect();
        for pair in pts.windows(2) {
            if let (Some(a), Some(b)) = (pair[0], pair[1]) {
                c.line(a.0, a.1, b.0, b.1, color, 2);
            }
        }
        for p in pts.iter().flatten() {
            c.rect((p.0 - 2.0).max(0.0) as usize, (p.1 - 2.0).max(0.0) as usize, 5, 5, color);
        }
        c.rect(w - 30, 10 + 14 * i, 10, 10, color);
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaGridInfo {
    pub timesteps: Vec<u32>,
    pub columns: Vec<String>,
}

/// A delta map scaled to `[0, 1]` around 0.5 by its own largest magnitude.
fn delta_tile(d: &Raster) -> Raster {
    let m = d.data.iter().fold(0.0f32, |a, v| a.max(v.abs())).max(1e-12);
    Raster {
        res: d.res,
        channels: d.channels,
        data: d.data.iter().map(|v| 0.5 + 0.5 * v / m).collect(),
    }
}

fn clipped(r: &Raster) -> Raster {
    Raster {
        res: r.res,
        channels: r.channels,
        data: r.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    }
}

/// `rows` evenly spaced step indices out of `n`, first and last included.
pub fn row_steps(n: usize, rows: usize) -> Vec<usize> {
    if rows == 0 || n == 0 {
        return Vec::new();
    }
    if rows == 1 {
        return vec![0];
    }
    let rows = rows.min(n);
    (0..rows).map(|i| (i * (n - 1) + (rows - 1) / 2) / (rows - 1)).collect()
}

/// Lays records out as timesteps × {delta per method, x₀ per method}.
pub fn delta_grid_from(records: &[(&str, &TrajectoryRecord)], rows: usize) -> Result<(Canvas, DeltaGridInfo)> {
    let first = records.first().ok_or_else(|| Error::contract("delta grid needs a record"))?.1;
    let n = first.steps.len();
    if records.iter().any(|(_, r)| r.steps.len() != n) || n == 0 {
        return Err(Error::contract("delta grid records differ in length or are empty"));
    }
    let res = first.steps[0].x0[0].res;
    let scale = (64 / res).max(1);
    let (tile, gap) = (res * scale, 2);
    let cols = 2 * records.len();
    let picks = row_steps(n, rows);
    let mut c = Canvas::new(cols * (tile + gap) + gap, picks.len() * (tile + gap) + gap, WHITE);
    for (ri, s) in picks.iter().enumerate() {
        for (mi, (_, rec)) in records.iter().enumerate() {
            let step = &rec.steps[*s];
            let y = gap + ri * (tile + gap);
            c.blit(&delta_tile(&step.delta[0]), gap + mi * (tile + gap), y, scale);
            c.blit(&clipped(&step.x0[0]), gap + (records.len() + mi) * (tile + gap), y, scale);
        }
    }
    let mut columns: Vec<String> = records.iter().map(|(n, _)| format!("{n} delta")).collect();
    columns.extend(records.iter().map(|(n, _)| format!("{n} x0")));
    Ok((
        c,
        DeltaGridInfo {
            timesteps: picks.iter().map(|s| first.steps[*s].t).collect(),
            columns,
        },
    ))
}

/// Samples `request` with controller CFG and with RCG at the same scale and
/// lays out their deltas and predicted clean images.
pub fn delta_grid(
    model: &ModelState,
    request: &RigRequest,
    w: f64,
    rows: usize,
    sampling: &SamplingConfig,
) -> Result<(Canvas, DeltaGridInfo)> {
    let (_, cfg) = generate_recorded(model, request, GuidanceSpec::new(GuidanceMode::CfgController, w)?, sampling)?;
    let (_, rcg) = generate_recorded(model, request, GuidanceSpec::new(GuidanceMode::Rcg, w)?, sampling)?;
    delta_grid_from(&[("cfg_controller", &cfg), ("rcg", &rcg)], rows)
}
