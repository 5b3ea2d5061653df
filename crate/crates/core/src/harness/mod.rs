//! Experiment orchestration: the end-to-end adapter-generation pipeline,
//! its baselines and metrics, and CSV output.
//!
//! Generated adapters are scored by cosine similarity, in flat weight
//! space, against the synthetic teacher's adapter for the same condition.
//! That stands in for a face-identity similarity metric; output headers
//! carry a `proxy` label to make the substitution explicit.

mod config;
mod export;
mod metrics;
mod pipeline;

pub use config::{CompressorKind, DataConfig, DiffusionSection, EvalSection, ExperimentConfig, InputPaths, VaeSection};
pub use export::{export_curves, write_report};
pub use metrics::{cosine, evaluate_similarity, linear_combination_baseline, random_floor, BaselineFit, SimilarityReport};
pub use pipeline::{
    fit_compressor, generate, load_dataset, prepare_dataset, run_pipeline, split_indices, train_denoiser, BaselineSummary,
    Compressor, EvalReport, ParamCounts,
};
