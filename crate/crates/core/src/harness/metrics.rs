use serde::Serialize;

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{normal_tensor, seeded};
use crate::synth::{teacher_lookup, SynthDataset};
use crate::tensor::Tensor;

/// Cosine similarity; fails for a zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("similarity undefined for a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Teacher-cosine scores of generated rows against their conditions' targets.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SimilarityReport {
    /// One entry per generated row; `None` where the similarity is undefined.
    pub per_row: Vec<Option<f64>>,
    /// Row index of each target in the dataset.
    pub target_rows: Vec<usize>,
    pub failures: Vec<(usize, String)>,
    pub mean: f64,
    pub std: f64,
}

fn summarize(per_row: &[Option<f64>]) -> (f64, f64) {
    let vals: Vec<f64> = per_row.iter().flatten().copied().collect();
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Compares each generated row with `teacher_lookup(conditions[i]).flat`.
/// Undefined similarities are recorded per row instead of failing the batch.
pub fn evaluate_similarity(generated: &Tensor, conditions: &Tensor, teacher: &SynthDataset) -> Result<SimilarityReport> {
    if generated.rows() != conditions.rows() {
        return Err(Error::Shape(format!("{} generated rows vs {} conditions", generated.rows(), conditions.rows())));
    }
    let mut report = SimilarityReport::default();
    for i in 0..generated.rows() {
        let m = teacher_lookup(teacher, conditions.row(i))?;
        report.target_rows.push(m.index);
        match cosine(generated.row(i), &m.flat) {
            Ok(s) => report.per_row.push(Some(s)),
            Err(e) => {
                report.per_row.push(None);
                report.failures.push((i, e.to_string()));
            }
        }
    }
    (report.mean, report.std) = summarize(&report.per_row);
    Ok(report)
}

/// Mean cosine between standard Gaussian vectors and the targets of
/// `conditions`, the chance level of the similarity metric.
pub fn random_floor(conditions: &Tensor, teacher: &SynthDataset, seed: u64) -> Result<f64> {
    let mut rng = seeded(seed);
    let random = normal_tensor(&mut rng, &[conditions.rows(), teacher.dim()], 1.0);
    Ok(evaluate_similarity(&random, conditions, teacher)?.mean)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineFit {
    pub weights: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residual: f64,
}

/// Fits `target ≈ Σ_i w_i·rows_i` by Adam on `‖Σ w_i x_i − target‖²`,
/// starting from `w = 0`. Returns the best iterate seen.
pub fn linear_combination_baseline(rows: &Tensor, target: &[f64], steps: usize, adam: AdamConfig) -> Result<BaselineFit> {
    let (n, d) = (rows.rows(), rows.cols());
    if n == 0 {
        return Err(Error::DegenerateData("baseline needs a nonempty dataset".into()));
    }
    if target.len() != d {
        return Err(Error::Shape(format!("target of length {} vs rows of width {d}", target.len())));
    }
    let t = Tensor::matrix(1, d, target.to_vec())?;
    let mut w = vec![Tensor::zeros(&[1, n])];
    let mut state = AdamState::new(adam);
    let eval = |w: &Tensor| -> Result<(Tensor, f64)> {
        let fitted = w.matmul(rows)?;
        let r = fitted.zip_map(&t, |a, b| a - b)?;
        let res = r.frobenius();
        Ok((r, res))
    };
    let (_, mut best_res) = eval(&w[0])?;
    let mut best = w[0].clone();
    for step in 0..steps {
        let (r, res) = eval(&w[0])?;
        if !res.is_finite() {
            return Err(Error::Training { at: step, detail: "baseline residual diverged".into() });
        }
        if res < best_res {
            best_res = res;
            best = w[0].clone();
        }
        // ∇_w ‖wX − t‖² = 2 (wX − t) Xᵀ
        let grad = r.matmul(&rows.transpose()?)?.map(|g| 2.0 * g);
        adam_step(&mut w, &[grad], &mut state)?;
    }
    let (_, res) = eval(&w[0])?;
    if res < best_res {
        best_res = res;
        best = w[0].clone();
    }
    let fitted = best.matmul(rows)?.into_data();
    Ok(BaselineFit { weights: best.into_data(), fitted, residual: best_res })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{teacher_generate, TeacherSpec};

    fn dataset() -> SynthDataset {
        teacher_generate(&TeacherSpec { seed: 2, ..TeacherSpec::default() }, 200).unwrap()
    }

    #[test]
    fn exact_and_negated_targets() {
        let ds = dataset();
        let idx: Vec<usize> = (0..20).collect();
        let sub = ds.select(&idx).unwrap();
        let r = evaluate_similarity(&sub.flat, &sub.conditions, &ds).unwrap();
        assert!(r.per_row.iter().all(|s| (s.unwrap() - 1.0).abs() < 1e-12));
        assert_eq!(r.target_rows, idx);
        let neg = sub.flat.map(|v| -v);
        let r = evaluate_similarity(&neg, &sub.conditions, &ds).unwrap();
        assert!(r.per_row.iter().all(|s| (s.unwrap() + 1.0).abs() < 1e-12));
    }

    #[test]
    fn random_vectors_are_near_orthogonal() {
        let ds = dataset();
        let floor = random_floor(&ds.conditions, &ds, 5).unwrap();
        assert!(floor.abs() <= 0.2, "floor {floor}");
        let mut rng = seeded(9);
        let random = normal_tensor(&mut rng, &[200, 160], 1.0);
        let r = evaluate_similarity(&random, &ds.conditions, &ds).unwrap();
        let mean_abs = r.per_row.iter().map(|s| s.unwrap().abs()).sum::<f64>() / 200.0;
        assert!(mean_abs <= 0.2);
    }

    #[test]
    fn zero_rows_are_reported_not_fatal() {
        let ds = dataset();
        let sub = ds.select(&[0, 1, 2]).unwrap();
        let mut gen = sub.flat.clone();
        for j in 0..gen.cols() {
            gen.set(1, j, 0.0);
        }
        let r = evaluate_similarity(&gen, &sub.conditions, &ds).unwrap();
        assert_eq!(r.per_row[1], None);
        assert_eq!(r.failures.len(), 1);
        assert!((r.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn baseline_recovers_planted_row() {
        let ds = dataset().select(&(0..20).collect::<Vec<_>>()).unwrap();
        let target = ds.flat.row(7).to_vec();
        let fit = linear_combination_baseline(&ds.flat, &target, 2000, AdamConfig { lr: 0.01, ..AdamConfig::default() }).unwrap();
        assert!(fit.residual <= 1e-6 * norm(&target), "residual {}", fit.residual);
    }

    #[test]
    fn baseline_cannot_leave_the_span() {
        let mut rows = Tensor::zeros(&[3, 5]);
        for i in 0..3 {
            rows.set(i, i, 1.0 + i as f64);
        }
        let target = [0.0, 0.0, 0.0, 2.0, -1.0];
        let fit = linear_combination_baseline(&rows, &target, 300, AdamConfig::default()).unwrap();
        assert!((fit.residual - norm(&target)).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_return_zero_weights() {
        let ds = dataset().select(&[0, 1, 2]).unwrap();
        let target = ds.flat.row(0).to_vec();
        let fit = linear_combination_baseline(&ds.flat, &target, 0, AdamConfig::default()).unwrap();
        assert!(fit.weights.iter().all(|&w| w == 0.0));
        assert_eq!(fit.residual, norm(&target));
        let empty = Tensor::zeros(&[0, 3]);
        assert!(linear_combination_baseline(&empty, &[1.0, 2.0, 3.0], 5, AdamConfig::default()).is_err());
    }
}
