//! Metrics, request sets and the sweep/ablation harnesses.

pub mod embedder;
pub mod harness;
pub mod metrics;
pub mod plot;
pub mod requests;

pub use embedder::{identity_similarity, train_embedder, EmbedderConfig, IdentityEmbedder};
pub use harness::{
    ablation_run, evaluate, generate, generate_recorded, guidance_sweep, AblationEntry, EvalReport, SamplingConfig,
    SweepTable,
};
pub use metrics::{appearance_consistency, reinference_error, reinference_errors, summarise, FitConfig, ReinferenceTable};
pub use plot::{delta_grid, delta_grid_from, sweep_plot, DeltaGridInfo};
pub use requests::{make_requests, read_requests, write_requests, Attribute, RigRequest};
