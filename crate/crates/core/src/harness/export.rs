use std::path::Path;

use super::pipeline::EvalReport;
use crate::error::{Error, Result};

pub const LOSS_HEADER: [&str; 2] = ["step", "diffusion_loss"];
pub const SIMILARITY_HEADER: [&str; 2] = ["step", "proxy_teacher_cosine_mean"];
pub const PCA_HEADER: [&str; 2] = ["k", "cumulative_explained_variance"];
pub const VAE_HEADER: [&str; 4] = ["epoch", "total", "recon", "kl"];
pub const SAMPLES_HEADER: [&str; 3] = ["row", "target_row", "proxy_teacher_cosine"];

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `loss_curve.csv`, `similarity_curve.csv`, `pca_variance.csv`,
/// `vae_loss.csv` and `samples.csv`. Floats use Rust's shortest round-trip
/// formatting, so identical reports give identical bytes.
pub fn export_curves(report: &EvalReport, dir: &Path) -> Result<()> {
    write_csv(
        &dir.join("loss_curve.csv"),
        &LOSS_HEADER,
        report.diffusion_loss.iter().enumerate().map(|(i, l)| [(i + 1).to_string(), l.to_string()]),
    )?;
    write_csv(
        &dir.join("similarity_curve.csv"),
        &SIMILARITY_HEADER,
        report.similarity_curve.iter().map(|(s, v)| [s.to_string(), v.to_string()]),
    )?;
    write_csv(
        &dir.join("pca_variance.csv"),
        &PCA_HEADER,
        report.pca_variance.iter().map(|(k, v)| [k.to_string(), v.to_string()]),
    )?;
    write_csv(
        &dir.join("vae_loss.csv"),
        &VAE_HEADER,
        report.vae_history.iter().map(|h| [h.epoch.to_string(), h.total.to_string(), h.recon.to_string(), h.kl.to_string()]),
    )?;
    write_csv(
        &dir.join("samples.csv"),
        &SAMPLES_HEADER,
        report.similarity.per_row.iter().zip(&report.similarity.target_rows).enumerate().map(|(i, (s, t))| {
            [i.to_string(), t.to_string(), s.map(|v| v.to_string()).unwrap_or_else(|| "nan".into())]
        }),
    )
}

/// `report.json`, including the wall-clock time kept out of the CSVs.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    let path = dir.join("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&path, e))
}
