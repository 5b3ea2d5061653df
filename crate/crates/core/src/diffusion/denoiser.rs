use serde::{Deserialize, Serialize};

use super::schedule::{DiffusionBatch, NoiseSchedule};
use crate::autodiff::{Graph, Var};
use crate::conditioning::{ConditioningMode, HiddenBlock};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Init, Linear, ParamId, ParamStore};
use crate::rng::{derive_seed, normal_tensor, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    X0,
    #[default]
    V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    /// Width of the external condition; 0 for an unconditional model.
    pub cond_dim: usize,
    pub hidden_width: usize,
    /// Number of hidden (conditioned) blocks.
    pub blocks: usize,
    pub time_embed_dim: usize,
    pub timesteps: usize,
    pub parameterization: Parameterization,
    pub conditioning: ConditioningMode,
    pub rank: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            data_dim: 0,
            cond_dim: 0,
            hidden_width: 128,
            blocks: 2,
            time_embed_dim: 16,
            timesteps: 100,
            parameterization: Parameterization::V,
            conditioning: ConditioningMode::AdaLora,
            rank: 4,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// Width of `y = timestep embedding ⊕ condition`.
    pub fn cond_input_dim(&self) -> usize {
        self.time_embed_dim + self.cond_dim
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden_width == 0 || self.timesteps < 2 {
            return Err(Error::Config("denoiser needs positive data/hidden widths and T ≥ 2".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("time embedding width must be even and positive, got {}", self.time_embed_dim)));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of `t`, rescaled so that `t = T` maps to 1000.
pub fn timestep_embedding(t: usize, timesteps: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let pos = t as f64 * 1000.0 / timesteps as f64;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((pos * freq).sin());
    }
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((pos * freq).cos());
    }
    out
}

/// MLP denoiser: `h₀ = act(x_t·W_x + y·W_y + b)`, then `blocks` conditioned
/// hidden layers, then a linear read-out to the data width.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub store: ParamStore,
    in_x: Linear,
    in_y: ParamId,
    blocks: Vec<HiddenBlock>,
    out: Linear,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut trunk_rng = seeded(derive_seed(config.seed, "denoiser-trunk"));
        let mut cond_rng = seeded(derive_seed(config.seed, "denoiser-cond"));
        let mut store = ParamStore::new();
        let (d, h, m_y) = (config.data_dim, config.hidden_width, config.cond_input_dim());
        let in_x = Linear::new(&mut store, "in", d, h, Init::Gain(1.0), &mut trunk_rng);
        let in_y = store.add("in.wy", normal_tensor(&mut trunk_rng, &[m_y, h], 1.0 / (m_y as f64).sqrt()));
        let blocks = (0..config.blocks)
            .map(|i| {
                HiddenBlock::new(
                    config.conditioning,
                    &mut store,
                    &format!("block{i}"),
                    h,
                    m_y,
                    config.rank,
                    &mut trunk_rng,
                    &mut cond_rng,
                )
            })
            .collect::<Result<_>>()?;
        let out = Linear::new(&mut store, "out", h, d, Init::Gain(1.0), &mut trunk_rng);
        Ok(DenoiserModel { config, store, in_x, in_y, blocks, out })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    /// Builds `y` for each row from its timestep and optional condition.
    pub fn condition_input(&self, t: &[usize], cond: Option<&Tensor>) -> Result<Tensor> {
        let c = &self.config;
        match cond {
            Some(m) if m.cols() != c.cond_dim || m.rows() != t.len() => {
                return Err(Error::Shape(format!("conditions {:?} for {} rows of width {}", m.shape(), t.len(), c.cond_dim)))
            }
            None if c.cond_dim > 0 => return Err(Error::Shape("conditional model needs conditions".into())),
            _ => {}
        }
        let mut data = Vec::with_capacity(t.len() * c.cond_input_dim());
        for (i, &ti) in t.iter().enumerate() {
            if ti > c.timesteps {
                return Err(Error::Config(format!("timestep {ti} outside 0..={}", c.timesteps)));
            }
            data.extend(timestep_embedding(ti, c.timesteps, c.time_embed_dim));
            if let Some(m) = cond {
                data.extend_from_slice(m.row(i));
            }
        }
        Tensor::matrix(t.len(), c.cond_input_dim(), data)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x_t: Var, y: Var) -> Result<Var> {
        let act = self.config.activation;
        let ax = self.in_x.forward(g, p, x_t)?;
        let ay = g.matmul(y, p.var(self.in_y))?;
        let pre = g.add(ax, ay)?;
        let mut h = act.apply(g, pre)?;
        for block in &self.blocks {
            let pre = block.forward(g, p, h, y)?;
            h = act.apply(g, pre)?;
        }
        self.out.forward(g, p, h)
    }

    /// Raw network output for a batch, without gradients.
    pub fn predict(&self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let cond = (self.config.cond_dim > 0).then_some(cond);
        self.predict_opt(x_t, t, cond)
    }

    pub fn predict_opt(&self, x_t: &Tensor, t: &[usize], cond: Option<&Tensor>) -> Result<Tensor> {
        if x_t.cols() != self.config.data_dim || x_t.rows() != t.len() {
            return Err(Error::Shape(format!("denoiser input {:?} for {} timesteps", x_t.shape(), t.len())));
        }
        let y = self.condition_input(t, cond)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xv = g.constant(x_t.clone());
        let yv = g.constant(y);
        let out = self.forward(&mut g, &p, xv, yv)?;
        Ok(g.value(out).clone())
    }

    /// Loss node for a batch: MSE against `x0` or `v` depending on the
    /// parameterization.
    pub fn loss_graph(&self, g: &mut Graph, p: &Bound, schedule: &NoiseSchedule, batch: &DiffusionBatch) -> Result<Var> {
        let target = batch.target(schedule, self.config.parameterization == Parameterization::V)?;
        let y = self.condition_input(&batch.t, batch.cond.as_ref())?;
        let xv = g.constant(batch.x_t.clone());
        let yv = g.constant(y);
        let out = self.forward(g, p, xv, yv)?;
        let tv = g.constant(target);
        g.mse(out, tv)
    }
}

pub fn diffusion_loss(model: &DenoiserModel, schedule: &NoiseSchedule, batch: &DiffusionBatch) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let l = model.loss_graph(&mut g, &p, schedule, batch)?;
    Ok(g.value(l).data()[0])
}
