//! Multi-start damped Gauss–Newton (Levenberg–Marquardt) recovery of face
//! parameters from a render, with central finite-difference Jacobians.
//!
//! Each start picks its pose from a coarse grid, then refines coarse to fine
//! over a box-filtered resolution pyramid.

use nalgebra::{DMatrix, DVector};

use super::control::{make_control, ControlMaps};
use super::params::*;
use super::render::{check_resolution, render_face};
use super::sample::{sample_identity, sample_state};
use crate::raster::Raster;
use crate::{Error, Result};

/// Per-element noise floor against which residuals are normalised: a
/// normalised residual of 1.0 is a mean squared error of `0.05²`.
pub const NOISE_FLOOR: f64 = 0.05;

/// What the fitter compares renders against.
#[derive(Debug, Clone, Copy)]
pub enum Observation<'a> {
    Controls(&'a ControlMaps),
    Image(&'a Raster),
}

impl Observation<'_> {
    fn res(&self) -> usize {
        match self {
            Observation::Controls(c) => c.res(),
            Observation::Image(r) => r.res,
        }
    }
}

/// Which parameters are free during fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitScope {
    /// Identity and state.
    Full,
    /// State only; identity frozen.
    State(IdentityParams),
    /// Shape and state; albedo and background frozen from the given identity.
    ShapeAndState(IdentityParams),
    /// Shape only; everything else frozen from the given parameters.
    Shape(FaceParams),
}

impl FitScope {
    fn free_indices(&self) -> Vec<usize> {
        match self {
            FitScope::Full => (0..PARAM_DIM).collect(),
            FitScope::State(_) => (IDENTITY_DIM..PARAM_DIM).collect(),
            FitScope::ShapeAndState(_) => (0..SHAPE_DIM).chain(IDENTITY_DIM..PARAM_DIM).collect(),
            FitScope::Shape(_) => (0..SHAPE_DIM).collect(),
        }
    }

    /// `p` with the frozen fields replaced by the scope's.
    fn impose(&self, mut p: FaceParams) -> FaceParams {
        match self {
            FitScope::Full => {}
            FitScope::State(id) => p.identity = *id,
            FitScope::ShapeAndState(id) => {
                let shape = p.identity.shape;
                p.identity = *id;
                p.identity.shape = shape;
            }
            FitScope::Shape(fixed) => {
                let shape = p.identity.shape;
                p = *fixed;
                p.identity.shape = shape;
            }
        }
        p
    }

    fn initial(&self, seed: u64) -> FaceParams {
        match self {
            FitScope::Full => {
                let id = sample_identity(seed);
                FaceParams::new(id, sample_state(&id, seed))
            }
            FitScope::State(id) => FaceParams::new(*id, sample_state(id, seed)),
            FitScope::ShapeAndState(id) => {
                let mut fresh = *id;
                fresh.shape = sample_identity(seed).shape;
                FaceParams::new(fresh, sample_state(&fresh, seed))
            }
            FitScope::Shape(fixed) => {
                let mut p = *fixed;
                p.identity.shape = sample_identity(seed).shape;
                p
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    /// Jacobian evaluations per start.
    pub max_iters: usize,
    pub fd_step: f64,
    /// A fit is converged when its normalised residual is below this.
    pub converge_below: f64,
    /// A start stops iterating, and remaining starts are skipped, once it
    /// reaches this normalised residual.
    pub early_exit: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 300,
            fd_step: 1e-3,
            converge_below: 1.0,
            early_exit: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FitResult {
    pub params: FaceParams,
    /// Mean squared error over `NOISE_FLOOR²`.
    pub residual: f64,
    pub mse: f64,
    pub converged: bool,
    pub starts_run: usize,
}

/// Fits with the default options; a frozen identity restricts the search to
/// the state parameters.
pub fn fit_params(
    observed: Observation<'_>,
    init_seeds: &[u64],
    frozen_identity: Option<&IdentityParams>,
) -> Result<FitResult> {
    let scope = match frozen_identity {
        Some(id) => FitScope::State(*id),
        None => FitScope::Full,
    };
    fit_params_with(observed, init_seeds, scope, &FitOptions::default())
}

pub fn fit_params_with(
    observed: Observation<'_>,
    init_seeds: &[u64],
    scope: FitScope,
    opts: &FitOptions,
) -> Result<FitResult> {
    fit_params_from(observed, &[], init_seeds, scope, opts)
}

/// Like [`fit_params_with`], trying the given parameter sets (with the
/// scope's frozen fields imposed) before the seeded random starts. Explicit
/// starts skip the pose search and the coarse levels.
pub fn fit_params_from(
    observed: Observation<'_>,
    initial: &[FaceParams],
    init_seeds: &[u64],
    scope: FitScope,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_resolution(observed.res())?;
    if init_seeds.is_empty() && initial.is_empty() {
        return Err(Error::contract("fit_params needs at least one start"));
    }
    let pyramid = Problem::pyramid(observed, scope)?;
    let starts = initial
        .iter()
        .map(|p| (scope.impose(*p), false))
        .chain(init_seeds.iter().map(|s| (scope.initial(*s), true)));
    let mut best: Option<FitResult> = None;
    let mut starts_run = 0;
    for (start, search_pose) in starts {
        starts_run += 1;
        let mut x: Vec<f64> = start.to_vec().into_iter().map(f64::from).collect();
        let finest = pyramid.last().expect("non-empty pyramid");
        finest.clamp(&mut x);
        let at_start = Problem::cost(&finest.residuals(&x)?);
        // A start that already explains the observation is kept as is.
        let skip = at_start < opts.early_exit * NOISE_FLOOR * NOISE_FLOOR;
        if !skip && search_pose {
            pyramid[0].grid_search_pose(&mut x)?;
        }
        let mut mse = at_start;
        // Explicit starts are refined at the observed resolution only.
        let first = if search_pose { 0 } else { pyramid.len() - 1 };
        for (level, problem) in pyramid.iter().enumerate().skip(first).filter(|_| !skip) {
            let last = level + 1 == pyramid.len();
            let tol = if last { 1e-9 } else { 1e-5 };
            mse = problem.solve(&mut x, opts, tol)?;
        }
        if !skip && mse >= opts.early_exit * NOISE_FLOOR * NOISE_FLOOR {
            // Silhouette edges are invisible to finite differences.
            let finest = pyramid.last().expect("non-empty pyramid");
            for _ in 0..PATTERN_CYCLES {
                let searched = finest.pattern_search(&mut x, mse)?;
                if searched >= mse * (1.0 - 1e-6) {
                    break;
                }
                mse = finest.solve(&mut x, opts, 1e-9)?;
                if mse < opts.early_exit * NOISE_FLOOR * NOISE_FLOOR {
                    break;
                }
            }
        }
        let v: Vec<f32> = x.iter().map(|v| *v as f32).collect();
        let params = FaceParams::from_slice(&v);
        let residual = mse / (NOISE_FLOOR * NOISE_FLOOR);
        if best.as_ref().is_none_or(|b| residual < b.residual) {
            best = Some(FitResult {
                params,
                residual,
                mse,
                converged: residual < opts.converge_below,
                starts_run,
            });
        }
        if residual < opts.early_exit {
            break;
        }
    }
    let mut best = best.expect("at least one start");
    best.starts_run = starts_run;
    Ok(best)
}

/// Coarse resolutions tried before the observed one.
const COARSE_LEVELS: [usize; 2] = [16, 32];
/// Pose values per axis tried by the initial grid search.
const POSE_GRID: [f64; 5] = [-0.6, -0.3, 0.0, 0.3, 0.6];
/// Pattern-search steps as fractions of each parameter's range.
const PATTERN_STEPS: [f64; 4] = [0.1, 0.03, 0.01, 0.003];
const PATTERN_ROUNDS: usize = 6;
/// Alternations of pattern search and Gauss–Newton per start.
const PATTERN_CYCLES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Controls,
    Image,
}

struct Problem {
    kind: Kind,
    res: usize,
    observed: Vec<f32>,
    free: Vec<usize>,
    bounds: Vec<(f32, f32)>,
}

impl Problem {
    /// One problem per resolution, coarsest first, ending at the observed one.
    fn pyramid(observed: Observation<'_>, scope: FitScope) -> Result<Vec<Problem>> {
        let (kind, raster) = match observed {
            Observation::Controls(c) => (Kind::Controls, &c.data),
            Observation::Image(r) => {
                if r.channels != 3 {
                    return Err(Error::shape(format!(
                        "observed image needs 3 channels, got {}",
                        r.channels
                    )));
                }
                (Kind::Image, r)
            }
        };
        let expected = if kind == Kind::Controls { 9 } else { 3 };
        if raster.channels != expected || raster.data.len() != raster.res * raster.res * expected {
            return Err(Error::shape("observation size"));
        }
        let mut levels: Vec<usize> = COARSE_LEVELS.iter().copied().filter(|r| *r < raster.res).collect();
        levels.push(raster.res);
        levels
            .into_iter()
            .map(|res| {
                Ok(Problem {
                    kind,
                    res,
                    observed: raster.downsample(res)?.data,
                    free: scope.free_indices(),
                    bounds: param_bounds(),
                })
            })
            .collect()
    }

    fn render_vec(&self, full: &[f64]) -> Result<Vec<f32>> {
        let v: Vec<f32> = full.iter().map(|x| *x as f32).collect();
        let bundle = render_face(&FaceParams::from_slice(&v), self.res)?;
        Ok(match self.kind {
            Kind::Controls => make_control(&bundle)?.data.data,
            Kind::Image => bundle.image.data,
        })
    }

    fn residuals(&self, full: &[f64]) -> Result<Vec<f64>> {
        let pred = self.render_vec(full)?;
        Ok(pred
            .iter()
            .zip(&self.observed)
            .map(|(p, o)| (*p - *o) as f64)
            .collect())
    }

    fn cost(r: &[f64]) -> f64 {
        r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
    }

    fn clamp(&self, full: &mut [f64]) {
        for &i in &self.free {
            let (lo, hi) = self.bounds[i];
            full[i] = full[i].clamp(lo as f64, hi as f64);
        }
    }

    /// Replaces the pose with the best point of a coarse grid, other
    /// parameters held at their current values.
    fn grid_search_pose(&self, full: &mut [f64]) -> Result<()> {
        let pose0 = IDENTITY_DIM + EXPRESSION_DIM;
        if !self.free.contains(&pose0) {
            return Ok(());
        }
        let mut probe = full.to_vec();
        let mut best = Self::cost(&self.residuals(full)?);
        for yaw in POSE_GRID {
            for pitch in POSE_GRID {
                for roll in POSE_GRID {
                    probe[pose0..pose0 + POSE_DIM].copy_from_slice(&[yaw, pitch, roll]);
                    self.clamp(&mut probe);
                    let c = Self::cost(&self.residuals(&probe)?);
                    if c < best {
                        best = c;
                        full[pose0..pose0 + POSE_DIM].copy_from_slice(&probe[pose0..pose0 + POSE_DIM]);
                    }
                }
            }
        }
        Ok(())
    }

    /// Coordinate search over the free parameters with steps shrinking from
    /// a tenth of each range. Returns the final mean squared error.
    fn pattern_search(&self, x: &mut [f64], mut cost: f64) -> Result<f64> {
        for frac in PATTERN_STEPS {
            let mut improved = true;
            let mut rounds = 0;
            while improved && rounds < PATTERN_ROUNDS {
                improved = false;
                rounds += 1;
                for &i in &self.free {
                    let (lo, hi) = self.bounds[i];
                    let h = frac * (hi - lo) as f64;
                    for dir in [1.0, -1.0] {
                        let mut probe = x.to_vec();
                        probe[i] = (x[i] + dir * h).clamp(lo as f64, hi as f64);
                        let c = Self::cost(&self.residuals(&probe)?);
                        if c < cost {
                            cost = c;
                            x.copy_from_slice(&probe);
                            improved = true;
                            break;
                        }
                    }
                }
            }
        }
        Ok(cost)
    }

    fn jacobian(&self, full: &[f64], h: f64) -> Result<DMatrix<f64>> {
        let n = self.observed.len();
        let mut jac = DMatrix::<f64>::zeros(n, self.free.len());
        let mut probe = full.to_vec();
        for (col, &i) in self.free.iter().enumerate() {
            let x0 = probe[i];
            probe[i] = x0 + h;
            let plus = self.render_vec(&probe)?;
            probe[i] = x0 - h;
            let minus = self.render_vec(&probe)?;
            probe[i] = x0;
            for (row, (p, m)) in plus.iter().zip(&minus).enumerate() {
                jac[(row, col)] = (*p - *m) as f64 / (2.0 * h);
            }
        }
        Ok(jac)
    }

    /// One Levenberg–Marquardt run, updating `x` in place. Stops when an
    /// accepted step improves the cost by less than `tol` (relative).
    /// Returns the final mean squared error.
    fn solve(&self, x: &mut Vec<f64>, opts: &FitOptions, tol: f64) -> Result<f64> {
        self.clamp(x);
        let mut r = self.residuals(x)?;
        let mut cost = Self::cost(&r);
        let mut lambda = 1e-3;
        let p = self.free.len();

        'outer: for _ in 0..opts.max_iters {
            if cost < opts.early_exit * NOISE_FLOOR * NOISE_FLOOR {
                break;
            }
            let jac = self.jacobian(x, opts.fd_step)?;
            let jtj = jac.transpose() * &jac;
            let jtr = jac.transpose() * DVector::from_column_slice(&r);
            let diag_max = (0..p).map(|i| jtj[(i, i)]).fold(0.0f64, f64::max);
            if diag_max <= 0.0 {
                break;
            }
            // Retry with heavier damping until the cost drops.
            loop {
                let mut a = jtj.clone();
                for i in 0..p {
                    a[(i, i)] += lambda * jtj[(i, i)].max(1e-9 * diag_max);
                }
                let step = match a.cholesky() {
                    Some(ch) => ch.solve(&(-&jtr)),
                    None => {
                        lambda *= 10.0;
                        if lambda > 1e12 {
                            break 'outer;
                        }
                        continue;
                    }
                };
                let mut candidate = x.clone();
                for (k, &i) in self.free.iter().enumerate() {
                    candidate[i] += step[k];
                }
                self.clamp(&mut candidate);
                let r_new = self.residuals(&candidate)?;
                let c_new = Self::cost(&r_new);
                if c_new < cost {
                    let improvement = (cost - c_new) / cost.max(1e-300);
                    *x = candidate;
                    r = r_new;
                    cost = c_new;
                    lambda = (lambda / 3.0).max(1e-9);
                    if improvement < tol {
                        break 'outer;
                    }
                    break;
                }
                lambda *= 4.0;
                if lambda > 1e12 {
                    break 'outer;
                }
            }
        }
        Ok(cost)
    }
}

/// RMSE between the normal maps rendered from two parameter sets.
pub fn normal_map_rmse(a: &FaceParams, b: &FaceParams, res: usize) -> Result<f64> {
    render_face(a, res)?.normals.rmse(&render_face(b, res)?.normals)
}

/// RMSE between the albedo maps rendered from two parameter sets.
pub fn albedo_map_rmse(a: &FaceParams, b: &FaceParams, res: usize) -> Result<f64> {
    render_face(a, res)?.albedo.rmse(&render_face(b, res)?.albedo)
}

/// RMSE between two SH lighting vectors.
pub fn lighting_rmse(a: &StateParams, b: &StateParams) -> f64 {
    let s: f64 = a
        .lighting
        .iter()
        .zip(&b.lighting)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    (s / LIGHTING_DIM as f64).sqrt()
}
