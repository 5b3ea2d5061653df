use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use wsforge_core::container::{save_adapter, Container};
use wsforge_core::diffusion::DiffusionModel;
use wsforge_core::error::StageExt;
use wsforge_core::harness::{
    evaluate_similarity, export_curves, fit_compressor, generate, load_dataset, prepare_dataset, random_floor,
    run_pipeline, split_indices, train_denoiser, CompressorKind, Compressor, EvalReport, ExperimentConfig,
};
use wsforge_core::lora::{unflatten, FlatLora};
use wsforge_core::pca::pca_fit;
use wsforge_core::rng::derive_seed;
use wsforge_core::synth::SynthDataset;
use wsforge_core::vae::write_loss_csv;

use crate::Common;

fn setup(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).stage("config")?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(cfg)
}

/// Prepared dataset and its `(train, held-out)` parts.
fn split(cfg: &ExperimentConfig) -> Result<(SynthDataset, SynthDataset, SynthDataset)> {
    let ds = prepare_dataset(cfg, load_dataset(cfg)?)?;
    let (t, h) = split_indices(cfg, ds.len());
    let train = ds.select(&t).stage("data")?;
    let held = ds.select(&h).stage("data")?;
    Ok((ds, train, held))
}

fn load_compressor(cfg: &ExperimentConfig, train: &SynthDataset) -> Result<Compressor> {
    match &cfg.inputs.compressor_model {
        Some(p) => Ok(Compressor::from_container(&Container::read(p)?).stage("compress")?),
        None if cfg.compressor == CompressorKind::None => Ok(Compressor::Identity(train.dim())),
        None => Ok(fit_compressor(cfg, &train.flat)?.0),
    }
}

fn export_adapters(dir: &Path, ds: &SynthDataset, generated: &wsforge_core::Tensor, count: usize) -> Result<()> {
    let adapter_dir = dir.join("adapters");
    fs::create_dir_all(&adapter_dir)?;
    for i in 0..generated.rows().min(count) {
        let mut flat = FlatLora::new(generated.row(i).to_vec(), ds.registry.clone())?;
        flat.id = format!("generated-{i:04}");
        save_adapter(&unflatten(&flat)?, &adapter_dir.join(format!("{}.wsf", flat.id)))?;
    }
    Ok(())
}

pub fn gen_data(c: &Common) -> Result<()> {
    let cfg = setup(c)?;
    let ds = load_dataset(&cfg)?;
    ds.save(&c.out).stage("export")?;
    println!("wrote {} rows of width {} to {}", ds.len(), ds.dim(), c.out.display());
    Ok(())
}

pub fn reparam(c: &Common) -> Result<()> {
    let cfg = setup(c)?;
    let ds = load_dataset(&cfg)?.to_balanced().stage("reparam")?;
    ds.save(&c.out).stage("export")?;
    let n = cfg.eval.export_adapters.min(ds.len());
    ds.export_adapters(&(0..n).collect::<Vec<_>>(), &c.out.join("adapters")).stage("export")?;
    println!("balanced {} adapters into {}", ds.len(), c.out.display());
    Ok(())
}

pub fn pca(c: &Common) -> Result<()> {
    let cfg = setup(c)?;
    let (_, train, _) = split(&cfg)?;
    let k = 32.min(train.len().saturating_sub(1)).min(train.dim());
    let curve = pca_fit(&train.flat, k).stage("compress")?.explained_variance_curve();
    let model = pca_fit(&train.flat, cfg.latent_dim).stage("compress")?;
    model.to_container()?.write(&c.out.join("pca.wsf"))?;
    let report = EvalReport { pca_variance: curve, ..EvalReport::default() };
    export_curves(&report, &c.out)?;
    println!(
        "k={} explains {:.4} of the variance; reconstruction MSE {:.6}",
        cfg.latent_dim,
        model.explained_variance_curve().last().map_or(0.0, |p| p.1),
        model.reconstruction_mse(&train.flat)?
    );
    Ok(())
}

pub fn train_vae(c: &Common) -> Result<()> {
    let cfg = setup(c)?;
    let (_, train, held) = split(&cfg)?;
    let cfg = ExperimentConfig { compressor: CompressorKind::Vae, ..cfg };
    let (comp, history) = fit_compressor(&cfg, &train.flat)?;
    comp.to_container()?.write(&c.out.join("vae.wsf"))?;
    write_loss_csv(&history, &c.out.join("vae_loss.csv"))?;
    println!(
        "VAE reconstruction MSE: train {:.6}, held-out {:.6}",
        comp.reconstruction_mse(&train.flat)?,
        comp.reconstruction_mse(&held.flat)?
    );
    Ok(())
}

pub fn train_diff(c: &Common) -> Result<()> {
    let cfg = setup(c)?;
    let (ds, train, held) = split(&cfg)?;
    let comp = load_compressor(&cfg, &train)?;
    let n_curve = cfg.eval.curve_samples.min(held.len());
    let curve_cond = held.select(&(0..n_curve).collect::<Vec<_>>())?.conditions;
    let (model, losses, curve) = train_denoiser(&cfg, &comp, &train, &curve_cond, &ds)?;
    model.to_container()?.write(&c.out.join("diffusion.wsf"))?;
    comp.to_container()?.write(&c.out.join("compressor.wsf"))?;
    println!("trained {} steps; final loss {:.6}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
    let report = EvalReport { diffusion_loss: losses, similarity_curve: curve, ..EvalReport::default() };
    export_curves(&report, &c.out)?;
    Ok(())
}

pub fn sample(c: &Common) -> Result<()> {
    let cfg = setup(c)?;
    let (ds, train, held) = split(&cfg)?;
    let path = cfg.inputs.diffusion_model.as_ref().ok_or_else(|| anyhow!("[sample] inputs.diffusion_model is required"))?;
    let model = DiffusionModel::from_container(&Container::read(path)?).stage("sample")?;
    let comp = load_compressor(&cfg, &train)?;
    let generated = generate(&model, &comp, &held.conditions, derive_seed(cfg.seed, "sample")).stage("sample")?;
    let mut out = Container::new("samples");
    out.push("generated", generated.clone());
    out.push("conditions", held.conditions.clone());
    out.write(&c.out.join("samples.wsf"))?;
    export_adapters(&c.out, &ds, &generated, cfg.eval.export_adapters)?;
    println!("sampled {} adapters", generated.rows());
    Ok(())
}

pub fn eval(c: &Common) -> Result<()> {
    let cfg = setup(c)?;
    let path = cfg.inputs.samples.as_ref().ok_or_else(|| anyhow!("[evaluate] inputs.samples is required"))?;
    let samples = Container::read(path)?;
    samples.expect_kind("samples").stage("evaluate")?;
    let (generated, conditions) = (samples.tensor("generated")?, samples.tensor("conditions")?);
    let ds = prepare_dataset(&cfg, load_dataset(&cfg)?)?;
    let similarity = evaluate_similarity(generated, conditions, &ds).stage("evaluate")?;
    let floor = random_floor(conditions, &ds, derive_seed(cfg.seed, "floor")).stage("evaluate")?;
    println!("proxy teacher cosine: mean {:.4} ± {:.4} (random floor {:.4})", similarity.mean, similarity.std, floor);
    let report = EvalReport {
        seed: cfg.seed,
        heldout_rows: generated.rows(),
        similarity,
        random_floor: floor,
        ..EvalReport::default()
    };
    export_curves(&report, &c.out)?;
    wsforge_core::harness::write_report(&report, &c.out)?;
    Ok(())
}

pub fn pipeline(c: &Common) -> Result<()> {
    let cfg = setup(c)?;
    let report = run_pipeline(&cfg, Some(&c.out))?;
    println!(
        "proxy teacher cosine on {} held-out conditions: mean {:.4} ± {:.4} (random floor {:.4}); {:.1}s",
        report.heldout_rows, report.similarity.mean, report.similarity.std, report.random_floor, report.wall_clock_secs
    );
    Ok(())
}
