use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::config::{CompressorKind, ExperimentConfig};
use super::export::{export_curves, write_report};
use super::metrics::{evaluate_similarity, linear_combination_baseline, random_floor, SimilarityReport};
use crate::container::{save_adapter, Container};
use crate::diffusion::{diffusion_train_with, sample, DiffusionModel};
use crate::error::{Error, Result, StageExt};
use crate::lora::{unflatten, FlatLora};
use crate::optim::AdamConfig;
use crate::pca::{pca_fit, PcaModel};
use crate::rng::{derive_seed, permutation, seeded};
use crate::synth::{teacher_generate, SynthDataset};
use crate::tensor::Tensor;
use crate::vae::{vae_train, EpochLog, VaeModel};

/// Maps flat adapter vectors to the space the diffusion model works in.
#[derive(Debug, Clone)]
pub enum Compressor {
    Pca(PcaModel),
    Vae(VaeModel),
    /// Diffusion directly on (standardized) flat vectors.
    Identity(usize),
}

impl Compressor {
    pub fn kind(&self) -> CompressorKind {
        match self {
            Compressor::Pca(_) => CompressorKind::Pca,
            Compressor::Vae(_) => CompressorKind::Vae,
            Compressor::Identity(_) => CompressorKind::None,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            Compressor::Pca(p) => p.k(),
            Compressor::Vae(v) => v.config.latent_dim,
            Compressor::Identity(d) => *d,
        }
    }

    /// PCA scores, VAE posterior means, or the rows themselves.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Compressor::Pca(p) => p.project_batch(x),
            Compressor::Vae(v) => Ok(v.encode_batch(x)?.0),
            Compressor::Identity(_) => Ok(x.clone()),
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Compressor::Pca(p) => p.reconstruct_batch(z),
            Compressor::Vae(v) => v.decode_batch(z),
            Compressor::Identity(_) => Ok(z.clone()),
        }
    }

    pub fn reconstruction_mse(&self, x: &Tensor) -> Result<f64> {
        let rec = self.decode(&self.encode(x)?)?;
        Ok(rec.zip_map(x, |a, b| (a - b) * (a - b))?.sum() / x.len() as f64)
    }

    pub fn to_container(&self) -> Result<Container> {
        match self {
            Compressor::Pca(p) => p.to_container(),
            Compressor::Vae(v) => v.to_container(),
            Compressor::Identity(d) => Container::new("identity").with_meta("dim", d),
        }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        match c.kind.as_str() {
            "pca" => Ok(Compressor::Pca(PcaModel::from_container(c)?)),
            "vae" => Ok(Compressor::Vae(VaeModel::from_container(c)?)),
            "identity" => Ok(Compressor::Identity(c.meta_as("dim")?)),
            other => Err(Error::Format(format!("no compressor of kind {other:?}"))),
        }
    }
}

/// Loads the configured dataset directory or generates one from the teacher.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SynthDataset> {
    match &cfg.data.path {
        Some(p) => SynthDataset::load(p),
        None => teacher_generate(&cfg.data.teacher, cfg.data.rows),
    }
    .stage("data")
}

/// Norm-balances every adapter when the config asks for it.
pub fn prepare_dataset(cfg: &ExperimentConfig, ds: SynthDataset) -> Result<SynthDataset> {
    if cfg.reparameterize {
        ds.to_balanced().stage("reparam")
    } else {
        Ok(ds)
    }
}

/// `(train, held_out)` row indices: a seeded shuffle, the first
/// `⌈fraction·n⌉` rows held out.
pub fn split_indices(cfg: &ExperimentConfig, n: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded(derive_seed(cfg.seed, "split"));
    let perm = permutation(&mut rng, n);
    let held = ((cfg.data.holdout_fraction * n as f64).ceil() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (h, t) = perm.split_at(held);
    (t.to_vec(), h.to_vec())
}

pub fn fit_compressor(cfg: &ExperimentConfig, x: &Tensor) -> Result<(Compressor, Vec<EpochLog>)> {
    match cfg.compressor {
        CompressorKind::Pca => Ok((Compressor::Pca(pca_fit(x, cfg.latent_dim)?), Vec::new())),
        CompressorKind::Vae => {
            let (m, h) = vae_train(&cfg.vae_config(x.cols()), x, &cfg.vae.train)?;
            Ok((Compressor::Vae(m), h))
        }
        CompressorKind::None => Ok((Compressor::Identity(x.cols()), Vec::new())),
    }
    .stage("compress")
}

/// Samples one vector per condition row and maps it back to flat space.
pub fn generate(model: &DiffusionModel, comp: &Compressor, conditions: &Tensor, seed: u64) -> Result<Tensor> {
    let z = sample(model, conditions.rows(), Some(conditions), seed)?;
    comp.decode(&z)
}

/// Trains the denoiser on compressed training rows. When `curve_every > 0`,
/// also records mean held-out similarity at regular step intervals.
pub fn train_denoiser(
    cfg: &ExperimentConfig,
    comp: &Compressor,
    train: &SynthDataset,
    curve_conditions: &Tensor,
    teacher: &SynthDataset,
) -> Result<(DiffusionModel, Vec<f64>, Vec<(usize, f64)>)> {
    let z = comp.encode(&train.flat).stage("diffusion")?;
    let dcfg = cfg.denoiser_config(z.cols(), train.conditions.cols());
    let mut curve = Vec::new();
    let curve_seed = derive_seed(cfg.seed, "curve");
    let (model, losses) = diffusion_train_with(
        dcfg,
        &z,
        Some(&train.conditions),
        &cfg.diffusion.train,
        if curve_conditions.rows() > 0 { cfg.eval.curve_every } else { 0 },
        |step, m| {
            let g = generate(m, comp, curve_conditions, curve_seed)?;
            curve.push((step, evaluate_similarity(&g, curve_conditions, teacher)?.mean));
            Ok(())
        },
    )
    .stage("diffusion")?;
    Ok((model, losses, curve))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParamCounts {
    pub denoiser: usize,
    pub vae: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSummary {
    pub target_row: usize,
    pub residual: f64,
    pub relative_residual: f64,
}

/// Everything a run measured. `wall_clock_secs` is the only field that is
/// not a deterministic function of the config.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub compressor: CompressorKind,
    pub train_rows: usize,
    pub heldout_rows: usize,
    pub similarity: SimilarityReport,
    pub random_floor: f64,
    pub recon_mse_train: f64,
    pub recon_mse_heldout: f64,
    pub pca_recon_mse: f64,
    pub diffusion_loss: Vec<f64>,
    pub vae_history: Vec<EpochLog>,
    pub similarity_curve: Vec<(usize, f64)>,
    pub pca_variance: Vec<(usize, f64)>,
    pub baseline: Vec<BaselineSummary>,
    pub param_counts: ParamCounts,
    pub wall_clock_secs: f64,
}

/// reparameterize → flatten → compress → diffuse → sample → decode →
/// unflatten → evaluate. With `out`, writes CSVs, `report.json`, the
/// trained models and a few generated adapters there.
pub fn run_pipeline(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<EvalReport> {
    cfg.validate().stage("config")?;
    let start = Instant::now();
    let ds = prepare_dataset(cfg, load_dataset(cfg)?)?;
    let (train_idx, held_idx) = split_indices(cfg, ds.len());
    let train = ds.select(&train_idx).stage("data")?;
    let held = ds.select(&held_idx).stage("data")?;

    let pca_k = 32.min(train.len().saturating_sub(1)).min(train.dim());
    let pca = pca_fit(&train.flat, pca_k).stage("compress")?;
    let pca_variance = pca.explained_variance_curve();
    let pca_recon_mse = pca_fit(&train.flat, cfg.latent_dim.min(pca_k))
        .and_then(|p| p.reconstruction_mse(&train.flat))
        .stage("compress")?;

    let (comp, vae_history) = fit_compressor(cfg, &train.flat)?;
    let recon_mse_train = comp.reconstruction_mse(&train.flat).stage("compress")?;
    let recon_mse_heldout = comp.reconstruction_mse(&held.flat).stage("compress")?;

    let n_curve = cfg.eval.curve_samples.min(held.len());
    let curve_cond = held.select(&(0..n_curve).collect::<Vec<_>>()).stage("data")?.conditions;
    let (model, diffusion_loss, similarity_curve) = train_denoiser(cfg, &comp, &train, &curve_cond, &ds)?;

    let generated = generate(&model, &comp, &held.conditions, derive_seed(cfg.seed, "sample")).stage("sample")?;
    let adapters = (0..generated.rows())
        .map(|i| {
            let mut flat = FlatLora::new(generated.row(i).to_vec(), ds.registry.clone())?;
            flat.id = format!("generated-{i:04}");
            flat.condition = Some(held.conditions.row(i).to_vec());
            unflatten(&flat)
        })
        .collect::<Result<Vec<_>>>()
        .stage("sample")?;

    let similarity = evaluate_similarity(&generated, &held.conditions, &ds).stage("evaluate")?;
    let random_floor = random_floor(&held.conditions, &ds, derive_seed(cfg.seed, "floor")).stage("evaluate")?;
    let adam = AdamConfig { lr: cfg.eval.baseline_lr, ..AdamConfig::default() };
    let baseline = held_idx
        .iter()
        .take(cfg.eval.baseline_targets)
        .map(|&row| {
            let target = ds.flat.row(row);
            let fit = linear_combination_baseline(&train.flat, target, cfg.eval.baseline_steps, adam)?;
            let norm = target.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok(BaselineSummary { target_row: row, residual: fit.residual, relative_residual: fit.residual / norm })
        })
        .collect::<Result<Vec<_>>>()
        .stage("evaluate")?;

    let report = EvalReport {
        seed: cfg.seed,
        compressor: cfg.compressor,
        train_rows: train.len(),
        heldout_rows: held.len(),
        similarity,
        random_floor,
        recon_mse_train,
        recon_mse_heldout,
        pca_recon_mse,
        diffusion_loss,
        vae_history,
        similarity_curve,
        pca_variance,
        baseline,
        param_counts: ParamCounts {
            denoiser: model.denoiser.param_count(),
            vae: match &comp {
                Compressor::Vae(v) => v.param_count(),
                _ => 0,
            },
        },
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)).stage("export")?;
        export_curves(&report, dir).stage("export")?;
        write_report(&report, dir).stage("export")?;
        model.to_container().and_then(|c| c.write(&dir.join("diffusion.wsf"))).stage("export")?;
        comp.to_container().and_then(|c| c.write(&dir.join("compressor.wsf"))).stage("export")?;
        let adapter_dir = dir.join("adapters");
        for a in adapters.iter().take(cfg.eval.export_adapters) {
            std::fs::create_dir_all(&adapter_dir).map_err(|e| Error::io(&adapter_dir, e)).stage("export")?;
            save_adapter(a, &adapter_dir.join(format!("{}.wsf", a.id()))).stage("export")?;
        }
    }
    Ok(report)
}
