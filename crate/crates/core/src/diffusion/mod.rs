//! Conditional denoising diffusion over vectors.
//!
//! The forward process is variance preserving: `x_t = α_t·x0 + σ_t·ε` with
//! `α_t = √ᾱ_t`, `σ_t = √(1 − ᾱ_t)` and a cosine `ᾱ`. The denoiser is an MLP
//! predicting either `x0` or `v = α_t·ε − σ_t·x0`; sampling is ancestral.

mod denoiser;
mod model;
mod schedule;

pub use denoiser::{diffusion_loss, timestep_embedding, DenoiserConfig, DenoiserModel, Parameterization};
pub use model::{
    diffusion_train, diffusion_train_with, sample, write_step_csv, DiffTrainConfig, DiffusionModel, Standardizer,
};
pub use schedule::{convert, cosine_schedule, q_sample, DiffusionBatch, Known, NoiseSchedule, Views, ALPHA_BAR_MIN};
