//! Reference-conditioned face rigging with dual-branch diffusion U-Nets.
//!
//! The crate is organised bottom-up:
//!
//! - [`facegen`]: a procedural parametric face with spherical-harmonics
//!   Lambertian shading, its control maps, and an inverse fitter that
//!   recovers parameters from renders.
//! - [`dataset`]: synthetic trajectories, training quadruplets and the
//!   `CFQ1` binary container.
//! - [`nets`]: the denoising U-Net, the FaceNet reference branch, augmented
//!   self-attention, the face controller, the control mixer module and the
//!   global context encoder.
//! - [`diffusion`]: noise schedule, training objective, DDIM sampling and the
//!   guidance rules (classifier-free variants and reference control
//!   guidance).
//! - [`train`]: the optimizer loop with resumable checkpoints.
//! - [`eval`]: re-inference error, identity similarity, appearance
//!   consistency, guidance sweeps and ablations.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod facegen;
pub mod raster;
pub mod nets;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
