//! Noise schedule, training objective, guidance rules and DDIM sampling.

pub mod batch;
pub mod guidance;
pub mod loss;
pub mod sampler;
pub mod schedule;

pub use batch::{image_to_latent, latent_to_image, Batch};
pub use guidance::{
    combine, guided_epsilon, prepare_guidance, GuidanceMode, GuidanceSpec, PreparedGuidance, SampleInputs,
};
pub use loss::{draw_step_noise, noise_prediction_loss, training_loss, training_loss_with, Dropout, LossOutput, StepNoise};
pub use sampler::{ddim_sample, initial_noise, SampleOutput, StepRecord, TrajectoryRecord};
pub use schedule::{make_schedule, Schedule, ScheduleConfig};
