//! The synthetic face world: parameters, SH shading, rendering, control
//! maps, seeded sampling and inverse fitting.

pub mod control;
pub mod fit;
pub mod params;
pub mod render;
pub mod sample;
pub mod sh;

pub use control::{make_control, ControlMaps, CONTROL_CHANNELS};
pub use fit::{fit_params, fit_params_from, fit_params_with, FitOptions, FitResult, FitScope, Observation};
pub use params::{FaceParams, IdentityParams, StateParams};
pub use render::{render_face, RenderBundle};
pub use sample::{sample_identity, sample_state};
pub use sh::sh_basis;
