use std::path::Path;

use serde::{Deserialize, Serialize};

use super::denoiser::{DenoiserConfig, DenoiserModel, Parameterization};
use super::schedule::{cosine_schedule, DiffusionBatch, NoiseSchedule};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, normal_tensor, seeded, Rng64};
use crate::tensor::Tensor;

use rand::Rng;

/// Per-dimension affine normalization to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Dimensions with (near) zero spread keep unit scale.
    pub fn fit(data: &Tensor) -> Result<Self> {
        let (n, d) = (data.rows(), data.cols());
        if n == 0 {
            return Err(Error::DegenerateData("cannot standardize an empty dataset".into()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, x) in mean.iter_mut().zip(data.row(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((v, x), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Standardizer { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    fn apply(&self, data: &Tensor, forward: bool) -> Result<Tensor> {
        if data.cols() != self.mean.len() {
            return Err(Error::Shape(format!("standardizer width {} vs data {:?}", self.mean.len(), data.shape())));
        }
        let d = self.mean.len();
        let out = data
            .data()
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let j = k % d;
                if forward {
                    (x - self.mean[j]) / self.std[j]
                } else {
                    x * self.std[j] + self.mean[j]
                }
            })
            .collect();
        Tensor::matrix(data.rows(), d, out)
    }

    pub fn transform(&self, data: &Tensor) -> Result<Tensor> {
        self.apply(data, true)
    }

    pub fn inverse(&self, data: &Tensor) -> Result<Tensor> {
        self.apply(data, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Cosine-decay the learning rate to zero over the run.
    pub lr_decay: bool,
    pub cosine_s: f64,
    /// `x̂0` is clipped to `±clip_multiplier·max|x|` of the standardized data.
    pub clip_multiplier: f64,
}

impl Default for DiffTrainConfig {
    fn default() -> Self {
        DiffTrainConfig {
            steps: 4000,
            batch_size: 128,
            adam: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
            lr_decay: true,
            cosine_s: 0.008,
            clip_multiplier: 3.0,
        }
    }
}

/// A trained denoiser together with its schedule and data normalization.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub denoiser: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub norm: Standardizer,
    /// Clip bound for `x̂0` in standardized units.
    pub clip: f64,
}

impl DiffusionModel {
    pub fn new(denoiser: DenoiserModel, schedule: NoiseSchedule, norm: Standardizer, clip: f64) -> Result<Self> {
        if schedule.timesteps != denoiser.config.timesteps || norm.mean.len() != denoiser.config.data_dim {
            return Err(Error::Config("schedule or normalization does not match the denoiser".into()));
        }
        Ok(DiffusionModel { denoiser, schedule, norm, clip })
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("diffusion")
            .with_meta("config", &self.denoiser.config)?
            .with_meta("cosine_s", self.schedule.s)?
            .with_meta("clip", self.clip)?;
        for (n, t) in self.denoiser.store.named() {
            c.push(n, t);
        }
        c.push("norm.mean", Tensor::vector(self.norm.mean.clone())?);
        c.push("norm.std", Tensor::vector(self.norm.std.clone())?);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("diffusion")?;
        let config: DenoiserConfig = c.meta_as("config")?;
        let schedule = cosine_schedule(config.timesteps, c.meta_as("cosine_s")?)?;
        let mut denoiser = DenoiserModel::new(config)?;
        let params: Vec<(String, Tensor)> = c.tensors.iter().filter(|(n, _)| !n.starts_with("norm.")).cloned().collect();
        denoiser.store.load_named(&params)?;
        let norm = Standardizer { mean: c.tensor("norm.mean")?.data().to_vec(), std: c.tensor("norm.std")?.data().to_vec() };
        DiffusionModel::new(denoiser, schedule, norm, c.meta_as("clip")?)
    }
}

/// Trains a fresh denoiser; returns the model and the per-step loss.
pub fn diffusion_train(
    config: DenoiserConfig,
    data: &Tensor,
    conditions: Option<&Tensor>,
    train: &DiffTrainConfig,
) -> Result<(DiffusionModel, Vec<f64>)> {
    diffusion_train_with(config, data, conditions, train, 0, |_, _| Ok(()))
}

/// Like [`diffusion_train`], calling `on_eval(step, model)` after every
/// `eval_every` steps (never when `eval_every` is 0).
pub fn diffusion_train_with<F>(
    config: DenoiserConfig,
    data: &Tensor,
    conditions: Option<&Tensor>,
    train: &DiffTrainConfig,
    eval_every: usize,
    mut on_eval: F,
) -> Result<(DiffusionModel, Vec<f64>)>
where
    F: FnMut(usize, &DiffusionModel) -> Result<()>,
{
    if data.rows() == 0 || train.batch_size == 0 {
        return Err(Error::Config("diffusion training needs data and a positive batch size".into()));
    }
    if let Some(c) = conditions {
        if c.rows() != data.rows() || c.cols() != config.cond_dim {
            return Err(Error::Shape(format!("conditions {:?} vs data {:?}", c.shape(), data.shape())));
        }
    } else if config.cond_dim > 0 {
        return Err(Error::Config("conditional denoiser trained without conditions".into()));
    }
    let schedule = cosine_schedule(config.timesteps, train.cosine_s)?;
    let norm = Standardizer::fit(data)?;
    let x = norm.transform(data)?;
    let clip = train.clip_multiplier * x.max_abs();
    let seed = config.seed;
    let mut model = DiffusionModel::new(DenoiserModel::new(config)?, schedule, norm, clip)?;
    let mut rng = seeded(derive_seed(seed, "diffusion-train"));
    let mut adam = AdamState::new(train.adam);
    let (n, d, t_max) = (x.rows(), x.cols(), model.schedule.timesteps);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        if train.lr_decay {
            let frac = step as f64 / train.steps as f64;
            adam.config.lr = train.adam.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        let idx: Vec<usize> = (0..train.batch_size).map(|_| rng.random_range(0..n)).collect();
        let mut x0 = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            x0.extend_from_slice(x.row(i));
        }
        let x0 = Tensor::matrix(idx.len(), d, x0)?;
        let t: Vec<usize> = (0..idx.len()).map(|_| rng.random_range(1..=t_max)).collect();
        let eps = normal_tensor(&mut rng, &[idx.len(), d], 1.0);
        let cond = match conditions {
            Some(c) => {
                let mut rows = Vec::with_capacity(idx.len() * c.cols());
                for &i in &idx {
                    rows.extend_from_slice(c.row(i));
                }
                Some(Tensor::matrix(idx.len(), c.cols(), rows)?)
            }
            None => None,
        };
        let batch = DiffusionBatch::new(&model.schedule, x0, t, eps, cond)?;
        let (den, sch) = (&model.denoiser, &model.schedule);
        let mut store = den.store.clone();
        let loss = store
            .train_step(&mut adam, |g, p| den.loss_graph(g, p, sch, &batch))
            .map_err(|e| Error::Training { at: step, detail: e.to_string() })?;
        model.denoiser.store = store;
        losses.push(loss);
        if eval_every > 0 && (step + 1) % eval_every == 0 {
            on_eval(step + 1, &model)?;
        }
    }
    Ok((model, losses))
}

/// Ancestral sampling of `n` vectors from `x_T ~ N(0, I)`; returns rows in
/// the original (unstandardized) data space. `conditions` must have `n`
/// rows for a conditional model.
pub fn sample(model: &DiffusionModel, n: usize, conditions: Option<&Tensor>, seed: u64) -> Result<Tensor> {
    let d = model.denoiser.config.data_dim;
    if n == 0 {
        return Tensor::new(vec![0, d], Vec::new()).or_else(|_| Ok(Tensor::zeros(&[0])));
    }
    let mut rng = seeded(derive_seed(seed, "diffusion-sample"));
    let mut x = normal_tensor(&mut rng, &[n, d], 1.0);
    let sch = &model.schedule;
    for t in (1..=sch.timesteps).rev() {
        let steps = vec![t; n];
        let out = model.denoiser.predict_opt(&x, &steps, conditions).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Sampling { t },
            other => other,
        })?;
        x = ancestral_step(model, &x, &out, t, &mut rng)?;
    }
    model.norm.inverse(&x)
}

fn ancestral_step(model: &DiffusionModel, x_t: &Tensor, out: &Tensor, t: usize, rng: &mut Rng64) -> Result<Tensor> {
    let sch = &model.schedule;
    let (ab_t, ab_prev) = (sch.alpha_bar(t)?, sch.alpha_bar(t - 1)?);
    let (a_t, s_t) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let beta = 1.0 - ab_t / ab_prev;
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let ct = (ab_t / ab_prev).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let std = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt();
    let v_mode = model.denoiser.config.parameterization == Parameterization::V;
    let noise = normal_tensor(rng, x_t.shape(), 1.0);
    let data = x_t
        .data()
        .iter()
        .zip(out.data())
        .zip(noise.data())
        .map(|((&xt, &o), &z)| {
            let x0 = if v_mode { a_t * xt - s_t * o } else { o };
            let x0 = x0.clamp(-model.clip, model.clip);
            c0 * x0 + ct * xt + std * z
        })
        .collect();
    let next = Tensor::matrix(x_t.rows(), x_t.cols(), data)?;
    if next.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Sampling { t });
    }
    Ok(next)
}

/// Writes `step,<column>` rows, one per logged value.
pub fn write_step_csv(values: &[f64], column: &str, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", column])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::ConditioningMode;

    fn two_moons(n: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (x, y) = if i % 2 == 0 { (th.cos(), th.sin()) } else { (1.0 - th.cos(), 0.5 - th.sin()) };
            let jitter = normal_tensor(&mut rng, &[2], 0.05);
            rows.push(vec![x + jitter.data()[0], y + jitter.data()[1]]);
        }
        Tensor::from_rows(&rows).unwrap()
    }

    fn moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let n = t.rows() as f64;
        let mean: Vec<f64> = (0..2).map(|j| (0..t.rows()).map(|i| t.get(i, j)).sum::<f64>() / n).collect();
        let mut cov = vec![0.0; 3];
        for i in 0..t.rows() {
            let (a, b) = (t.get(i, 0) - mean[0], t.get(i, 1) - mean[1]);
            cov[0] += a * a / n;
            cov[1] += a * b / n;
            cov[2] += b * b / n;
        }
        (mean, cov)
    }

    fn toy_config(param: Parameterization) -> DenoiserConfig {
        DenoiserConfig {
            data_dim: 2,
            cond_dim: 0,
            hidden_width: 64,
            blocks: 2,
            conditioning: ConditioningMode::None,
            parameterization: param,
            timesteps: 100,
            seed: 5,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn two_moons_moments_are_recovered() {
        let data = two_moons(2000, 1);
        let train = DiffTrainConfig { steps: 5000, batch_size: 128, ..DiffTrainConfig::default() };
        let (model, losses) = diffusion_train(toy_config(Parameterization::V), &data, None, &train).unwrap();
        assert_eq!(losses.len(), 5000);
        let s = sample(&model, 2000, None, 9).unwrap();
        let ((m0, c0), (m1, c1)) = (moments(&data), moments(&s));
        for (a, b) in m0.iter().zip(&m1).chain(c0.iter().zip(&c1)) {
            // relative where the moment is sizeable, absolute near zero
            assert!((a - b).abs() <= 0.15 * a.abs().max(0.1), "data {a} vs samples {b}");
        }
    }

    #[test]
    fn zero_x0_model_samples_concentrate_at_zero() {
        let cfg = toy_config(Parameterization::X0);
        let mut den = DenoiserModel::new(cfg.clone()).unwrap();
        let out = *den.output_layer();
        den.store.get_mut(out.w).data_mut().fill(0.0);
        let sch = cosine_schedule(cfg.timesteps, 0.008).unwrap();
        let model = DiffusionModel::new(den, sch, Standardizer::identity(2), 3.0).unwrap();
        let s = sample(&model, 1024, None, 1).unwrap();
        let (mean, _) = moments(&s);
        assert!(mean.iter().map(|m| m * m).sum::<f64>().sqrt() <= 0.1);
        assert_eq!(sample(&model, 0, None, 1).unwrap().len(), 0);
    }

    #[test]
    fn training_and_sampling_are_deterministic() {
        let data = two_moons(200, 2);
        let train = DiffTrainConfig { steps: 30, batch_size: 16, ..DiffTrainConfig::default() };
        let (a, la) = diffusion_train(toy_config(Parameterization::V), &data, None, &train).unwrap();
        let (b, lb) = diffusion_train(toy_config(Parameterization::V), &data, None, &train).unwrap();
        assert_eq!(la, lb);
        assert_eq!(sample(&a, 50, None, 3).unwrap(), sample(&b, 50, None, 3).unwrap());
        assert_ne!(sample(&a, 50, None, 3).unwrap(), sample(&a, 50, None, 4).unwrap());
    }

    #[test]
    fn conditional_samples_follow_their_condition() {
        // two clusters, each tagged by a one-hot condition
        let mut rng = seeded(3);
        let centers = [[2.0, 0.5, -1.0], [-1.5, 1.0, 2.0]];
        let mut rows = Vec::new();
        let mut conds = Vec::new();
        for i in 0..400 {
            let k = i % 2;
            let noise = normal_tensor(&mut rng, &[3], 0.1);
            rows.push(centers[k].iter().zip(noise.data()).map(|(c, e)| c + e).collect());
            conds.push(if k == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
        }
        let (data, cond) = (Tensor::from_rows(&rows).unwrap(), Tensor::from_rows(&conds).unwrap());
        let cfg = DenoiserConfig {
            data_dim: 3,
            cond_dim: 2,
            hidden_width: 32,
            conditioning: ConditioningMode::AdaLora,
            rank: 2,
            timesteps: 50,
            seed: 1,
            ..DenoiserConfig::default()
        };
        let train = DiffTrainConfig { steps: 800, batch_size: 64, ..DiffTrainConfig::default() };
        let (model, _) = diffusion_train(cfg, &data, Some(&cond), &train).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        for (k, c) in [[1.0, 0.0], [0.0, 1.0]].iter().enumerate() {
            let cm = Tensor::from_rows(&vec![c.to_vec(); 64]).unwrap();
            let s = sample(&model, 64, Some(&cm), 7).unwrap();
            let margin: f64 = (0..64).map(|i| cos(s.row(i), &centers[k]) - cos(s.row(i), &centers[1 - k])).sum::<f64>() / 64.0;
            assert!(margin > 0.0, "condition {k}: margin {margin}");
        }
    }

    #[test]
    fn container_roundtrip() {
        let data = two_moons(100, 4);
        let train = DiffTrainConfig { steps: 5, batch_size: 8, ..DiffTrainConfig::default() };
        let (m, _) = diffusion_train(toy_config(Parameterization::X0), &data, None, &train).unwrap();
        let back = DiffusionModel::from_container(&Container::from_bytes(&m.to_container().unwrap().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.denoiser.config, m.denoiser.config);
        assert_eq!(back.schedule, m.schedule);
        assert!((back.clip - m.clip).abs() < 1e-5 * m.clip);
    }
}
