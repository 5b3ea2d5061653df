//! Condition-dependent hidden layers for the denoiser.
//!
//! Every block maps a hidden batch `h` (`b×d_h`) and a condition batch `y`
//! (`b×m_y`) to a pre-activation of width `d_h`:
//!
//! - plain: `W·h + bias`
//! - AdaNorm: `(1 + s(y)) ⊙ layernorm(W·h + bias) + b(y)`
//! - AdaLoRA: `W·h + bias + A(y)·(B(y)·h)` with `A(y)` of shape `d_h×r` and
//!   `B(y)` of shape `r×d_h`
//!
//! The condition networks are one-hidden-layer tanh MLPs of width `2·m_y`.
//! Their final layers start at zero where that makes the block start out
//! as its base transform (`s`, `b` and `g`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffusion::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Init, Linear, Mlp, ParamStore};
use crate::rng::Rng64;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningMode {
    None,
    AdaNorm,
    #[default]
    AdaLora,
}

/// `y ↦ W₂·tanh(W₁·y + b₁) + b₂`.
#[derive(Debug, Clone)]
pub struct CondNet {
    mlp: Mlp,
}

impl CondNet {
    pub fn new(store: &mut ParamStore, name: &str, m_y: usize, out: usize, zero_last: bool, rng: &mut Rng64) -> Result<Self> {
        let mlp = Mlp::new(store, name, &[m_y, 2 * m_y, out], Activation::Tanh, zero_last, rng)?;
        Ok(CondNet { mlp })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<Var> {
        self.mlp.forward(g, p, y)
    }

    pub fn output_layer(&self) -> &Linear {
        self.mlp.output_layer()
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct AdaNormBlock {
    pub base: Linear,
    pub s_net: CondNet,
    pub b_net: CondNet,
    pub eps: f64,
}

impl AdaNormBlock {
    /// The base layer draws from `trunk_rng`, the condition nets from
    /// `cond_rng`, so trunks match across modes for equal seeds.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_h: usize,
        m_y: usize,
        trunk_rng: &mut Rng64,
        cond_rng: &mut Rng64,
    ) -> Result<Self> {
        let base = Linear::new(store, &format!("{name}.base"), d_h, d_h, Init::Gain(1.0), trunk_rng);
        let s_net = CondNet::new(store, &format!("{name}.s"), m_y, d_h, true, cond_rng)?;
        let b_net = CondNet::new(store, &format!("{name}.b"), m_y, d_h, true, cond_rng)?;
        Ok(AdaNormBlock { base, s_net, b_net, eps: LAYER_NORM_EPS })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var, y: Var) -> Result<Var> {
        check_dims(g, h, y, self.base.d_in, self.s_net.mlp.layers[0].d_in)?;
        let pre = self.base.forward(g, p, h)?;
        let normed = g.layer_norm(pre, self.eps)?;
        let s = self.s_net.forward(g, p, y)?;
        let scale = g.add_scalar(s, 1.0)?;
        let scaled = g.mul(scale, normed)?;
        let shift = self.b_net.forward(g, p, y)?;
        g.add(scaled, shift)
    }

    pub fn param_count(&self) -> usize {
        self.base.param_count() + self.s_net.param_count() + self.b_net.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct AdaLoraBlock {
    pub base: Linear,
    /// Produces `A(y)`, `d_h×r` row-major.
    pub f_net: CondNet,
    /// Produces `B(y)`, `r×d_h` row-major; zero-initialized output layer.
    pub g_net: CondNet,
    pub rank: usize,
}

impl AdaLoraBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_h: usize,
        m_y: usize,
        rank: usize,
        trunk_rng: &mut Rng64,
        cond_rng: &mut Rng64,
    ) -> Result<Self> {
        if rank == 0 || rank > d_h {
            return Err(Error::Rank { rank, max: d_h });
        }
        let base = Linear::new(store, &format!("{name}.base"), d_h, d_h, Init::Gain(1.0), trunk_rng);
        let f_net = CondNet::new(store, &format!("{name}.f"), m_y, d_h * rank, false, cond_rng)?;
        let g_net = CondNet::new(store, &format!("{name}.g"), m_y, rank * d_h, true, cond_rng)?;
        Ok(AdaLoraBlock { base, f_net, g_net, rank })
    }

    /// Per-row `A(y)` and `B(y)` as graph values.
    pub fn factors(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<(Var, Var)> {
        Ok((self.f_net.forward(g, p, y)?, self.g_net.forward(g, p, y)?))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var, y: Var) -> Result<Var> {
        check_dims(g, h, y, self.base.d_in, self.f_net.mlp.layers[0].d_in)?;
        let pre = self.base.forward(g, p, h)?;
        let (a, b) = self.factors(g, p, y)?;
        let delta = g.low_rank_apply(a, b, h, self.rank)?;
        g.add(pre, delta)
    }

    /// Size of the generated low-rank factors, `d_h·r + r·d_h`.
    pub fn factor_size(&self) -> usize {
        2 * self.base.d_in * self.rank
    }

    pub fn param_count(&self) -> usize {
        self.base.param_count() + self.f_net.param_count() + self.g_net.param_count()
    }
}

fn check_dims(g: &Graph, h: Var, y: Var, d_h: usize, m_y: usize) -> Result<()> {
    let (hv, yv) = (g.value(h), g.value(y));
    if hv.cols() != d_h || yv.cols() != m_y || hv.rows() != yv.rows() {
        return Err(Error::Shape(format!(
            "block expects h[b×{d_h}], y[b×{m_y}], got {:?} and {:?}",
            hv.shape(),
            yv.shape()
        )));
    }
    Ok(())
}

/// One hidden layer of the denoiser trunk, before its activation.
#[derive(Debug, Clone)]
pub enum HiddenBlock {
    Plain(Linear),
    AdaNorm(AdaNormBlock),
    AdaLora(AdaLoraBlock),
}

impl HiddenBlock {
    pub fn new(
        mode: ConditioningMode,
        store: &mut ParamStore,
        name: &str,
        d_h: usize,
        m_y: usize,
        rank: usize,
        trunk_rng: &mut Rng64,
        cond_rng: &mut Rng64,
    ) -> Result<Self> {
        Ok(match mode {
            ConditioningMode::None => {
                HiddenBlock::Plain(Linear::new(store, &format!("{name}.base"), d_h, d_h, Init::Gain(1.0), trunk_rng))
            }
            ConditioningMode::AdaNorm => {
                HiddenBlock::AdaNorm(AdaNormBlock::new(store, name, d_h, m_y, trunk_rng, cond_rng)?)
            }
            ConditioningMode::AdaLora => {
                HiddenBlock::AdaLora(AdaLoraBlock::new(store, name, d_h, m_y, rank, trunk_rng, cond_rng)?)
            }
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, h: Var, y: Var) -> Result<Var> {
        match self {
            HiddenBlock::Plain(l) => l.forward(g, p, h),
            HiddenBlock::AdaNorm(b) => b.forward(g, p, h, y),
            HiddenBlock::AdaLora(b) => b.forward(g, p, h, y),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            HiddenBlock::Plain(l) => l.param_count(),
            HiddenBlock::AdaNorm(b) => b.param_count(),
            HiddenBlock::AdaLora(b) => b.param_count(),
        }
    }
}

/// Builds a denoiser whose hidden layers use the requested conditioning
/// mechanism. Trunk weights depend only on the seed and the trunk widths,
/// never on the mode.
pub fn build_conditioned_denoiser(config: DenoiserConfig) -> Result<DenoiserModel> {
    DenoiserModel::new(config)
}
