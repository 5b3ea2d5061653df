use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningMode;
use crate::diffusion::{DenoiserConfig, DiffTrainConfig, Parameterization};
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::optim::AdamConfig;
use crate::synth::TeacherSpec;
use crate::vae::{VaeConfig, VaeTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CompressorKind {
    Pca,
    #[default]
    Vae,
    None,
}

/// Where the adapter dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Existing dataset directory; when absent the teacher generates one.
    pub path: Option<PathBuf>,
    pub teacher: TeacherSpec,
    pub rows: usize,
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { path: None, teacher: TeacherSpec::default(), rows: 2048, holdout_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeSection {
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub activation: Activation,
    pub train: VaeTrainConfig,
}

impl Default for VaeSection {
    fn default() -> Self {
        VaeSection {
            hidden: vec![64],
            beta: 0.1,
            activation: Activation::Tanh,
            train: VaeTrainConfig {
                epochs: 150,
                batch_size: 64,
                adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSection {
    pub timesteps: usize,
    pub parameterization: Parameterization,
    pub conditioning: ConditioningMode,
    pub rank: usize,
    pub hidden_width: usize,
    pub blocks: usize,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub train: DiffTrainConfig,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        DiffusionSection {
            timesteps: d.timesteps,
            parameterization: d.parameterization,
            conditioning: d.conditioning,
            rank: d.rank,
            hidden_width: d.hidden_width,
            blocks: d.blocks,
            time_embed_dim: d.time_embed_dim,
            activation: d.activation,
            train: DiffTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Steps between similarity-curve evaluations; 0 disables the curve.
    pub curve_every: usize,
    /// Held-out conditions used for each curve point.
    pub curve_samples: usize,
    /// Held-out targets refit by the linear-combination baseline.
    pub baseline_targets: usize,
    pub baseline_steps: usize,
    pub baseline_lr: f64,
    /// Generated adapters written as `.wsf` files.
    pub export_adapters: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            curve_every: 500,
            curve_samples: 64,
            baseline_targets: 4,
            baseline_steps: 500,
            baseline_lr: 0.05,
            export_adapters: 4,
        }
    }
}

/// Model and sample files consumed by the single-stage subcommands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub compressor_model: Option<PathBuf>,
    pub diffusion_model: Option<PathBuf>,
    pub samples: Option<PathBuf>,
}

/// One experiment, end to end. Every field has a default, so `{}` is a
/// valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// Norm-balance every adapter before flattening. Off by default: the
    /// balanced factors jump whenever an SVD sign or singular-value order
    /// flips, which the compressors and the denoiser cannot model.
    pub reparameterize: bool,
    pub compressor: CompressorKind,
    /// Latent width for the VAE and number of PCA components.
    pub latent_dim: usize,
    pub vae: VaeSection,
    pub diffusion: DiffusionSection,
    pub eval: EvalSection,
    pub inputs: InputPaths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataConfig::default(),
            reparameterize: false,
            compressor: CompressorKind::Vae,
            latent_dim: 8,
            vae: VaeSection::default(),
            diffusion: DiffusionSection::default(),
            eval: EvalSection::default(),
            inputs: InputPaths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return Err(Error::Config(format!("holdout fraction must lie in (0, 1), got {}", self.data.holdout_fraction)));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if let Some(p) = &self.data.path {
            if !p.join("manifest.json").is_file() {
                return Err(Error::Config(format!("dataset directory {} has no manifest.json", p.display())));
            }
        }
        let inputs = &self.inputs;
        for p in [&inputs.compressor_model, &inputs.diffusion_model, &inputs.samples].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        self.data.teacher.validate()
    }

    pub fn vae_config(&self, input_dim: usize) -> VaeConfig {
        VaeConfig {
            input_dim,
            latent_dim: self.latent_dim,
            hidden: self.vae.hidden.clone(),
            beta: self.vae.beta,
            activation: self.vae.activation,
            seed: crate::rng::derive_seed(self.seed, "vae"),
        }
    }

    pub fn denoiser_config(&self, data_dim: usize, cond_dim: usize) -> DenoiserConfig {
        let d = &self.diffusion;
        DenoiserConfig {
            data_dim,
            cond_dim,
            hidden_width: d.hidden_width,
            blocks: d.blocks,
            time_embed_dim: d.time_embed_dim,
            timesteps: d.timesteps,
            parameterization: d.parameterization,
            conditioning: d.conditioning,
            rank: d.rank,
            activation: d.activation,
            seed: crate::rng::derive_seed(self.seed, "denoiser"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_gives_defaults() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_json_overrides_fields() {
        let cfg = ExperimentConfig::from_json(
            r#"{"seed": 7, "compressor": "none", "diffusion": {"parameterization": "x0", "conditioning": "adanorm"}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.compressor, CompressorKind::None);
        assert_eq!(cfg.diffusion.parameterization, Parameterization::X0);
        assert_eq!(cfg.diffusion.conditioning, ConditioningMode::AdaNorm);
        assert_eq!(cfg.diffusion.rank, 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"data": {"holdout_fraction": 1.5}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"path": "/nonexistent/dir"}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"compressor": "svd"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"latent_dim": 0}"#).is_err());
    }

    #[test]
    fn serialization_roundtrip() {
        let cfg = ExperimentConfig { seed: 3, compressor: CompressorKind::Pca, ..ExperimentConfig::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }
}
