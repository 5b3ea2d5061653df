use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest cumulative signal level, reached at `t = T`.
pub const ALPHA_BAR_MIN: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub s: f64,
    /// `ᾱ_t` for `t = 0..=T`.
    pub alpha_bar: Vec<f64>,
}

/// Cosine schedule `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`,
/// squashed affinely into `[ALPHA_BAR_MIN, 1]` so that it stays strictly
/// decreasing (a hard clip would flatten the tail for large `T`).
pub fn cosine_schedule(timesteps: usize, s: f64) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(Error::Config(format!("schedule needs T ≥ 2, got {timesteps}")));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Config(format!("cosine offset must be positive, got {s}")));
    }
    let f = |t: usize| {
        let x = (t as f64 / timesteps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let alpha_bar = (0..=timesteps)
        .map(|t| if t == 0 { 1.0 } else { ALPHA_BAR_MIN + (1.0 - ALPHA_BAR_MIN) * (f(t) / f0).clamp(0.0, 1.0) })
        .collect();
    Ok(NoiseSchedule { timesteps, s, alpha_bar })
}

impl NoiseSchedule {
    fn check(&self, t: usize) -> Result<()> {
        if t > self.timesteps {
            return Err(Error::Config(format!("timestep {t} outside 0..={}", self.timesteps)));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    /// `(α_t, σ_t)`.
    pub fn alpha_sigma(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }
}

/// `x_t = α_t·x0 + σ_t·ε` elementwise.
pub fn q_sample(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!("q_sample x0 {} vs ε {}", x0.len(), eps.len())));
    }
    let (a, s) = schedule.alpha_sigma(t)?;
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}

/// A pair of known views of one noised datum.
#[derive(Debug, Clone, Copy)]
pub enum Known<'a> {
    X0Eps { x0: &'a [f64], eps: &'a [f64] },
    XtV { x_t: &'a [f64], v: &'a [f64] },
    XtX0 { x_t: &'a [f64], x0: &'a [f64] },
    XtEps { x_t: &'a [f64], eps: &'a [f64] },
    X0V { x0: &'a [f64], v: &'a [f64] },
    EpsV { eps: &'a [f64], v: &'a [f64] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Views {
    pub x_t: Vec<f64>,
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub v: Vec<f64>,
}

fn lin(p: f64, a: &[f64], q: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| p * x + q * y).collect()
}

/// Completes `{x_t, x0, ε, v}` from any two of them at step `t`.
pub fn convert(schedule: &NoiseSchedule, t: usize, known: Known<'_>) -> Result<Views> {
    let (a, s) = schedule.alpha_sigma(t)?;
    let same = |p: &[f64], q: &[f64]| {
        if p.len() == q.len() {
            Ok(())
        } else {
            Err(Error::Shape(format!("convert lengths {} vs {}", p.len(), q.len())))
        }
    };
    let from_x0_eps = |x0: Vec<f64>, eps: Vec<f64>| Views { x_t: lin(a, &x0, s, &eps), v: lin(a, &eps, -s, &x0), x0, eps };
    Ok(match known {
        Known::X0Eps { x0, eps } => {
            same(x0, eps)?;
            from_x0_eps(x0.to_vec(), eps.to_vec())
        }
        Known::XtV { x_t, v } => {
            same(x_t, v)?;
            Views { x0: lin(a, x_t, -s, v), eps: lin(s, x_t, a, v), x_t: x_t.to_vec(), v: v.to_vec() }
        }
        Known::XtX0 { x_t, x0 } => {
            same(x_t, x0)?;
            if s == 0.0 {
                return Err(Error::Singularity { t });
            }
            let eps = lin(1.0 / s, x_t, -a / s, x0);
            Views { v: lin(a, &eps, -s, x0), eps, x_t: x_t.to_vec(), x0: x0.to_vec() }
        }
        Known::XtEps { x_t, eps } => {
            same(x_t, eps)?;
            let x0 = lin(1.0 / a, x_t, -s / a, eps);
            Views { v: lin(a, eps, -s, &x0), x0, x_t: x_t.to_vec(), eps: eps.to_vec() }
        }
        Known::X0V { x0, v } => {
            same(x0, v)?;
            let eps = lin(1.0 / a, v, s / a, x0);
            Views { x_t: lin(a, x0, s, &eps), eps, x0: x0.to_vec(), v: v.to_vec() }
        }
        Known::EpsV { eps, v } => {
            same(eps, v)?;
            if s == 0.0 {
                return Err(Error::Singularity { t });
            }
            let x0 = lin(a / s, eps, -1.0 / s, v);
            Views { x_t: lin(a, &x0, s, eps), x0, eps: eps.to_vec(), v: v.to_vec() }
        }
    })
}

/// Training batch: clean rows, their timesteps and noise, and the noised rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionBatch {
    pub x0: Tensor,
    pub t: Vec<usize>,
    pub eps: Tensor,
    pub x_t: Tensor,
    pub cond: Option<Tensor>,
}

impl DiffusionBatch {
    pub fn new(schedule: &NoiseSchedule, x0: Tensor, t: Vec<usize>, eps: Tensor, cond: Option<Tensor>) -> Result<Self> {
        x0.same_shape(&eps, "diffusion batch")?;
        if t.len() != x0.rows() || cond.as_ref().is_some_and(|c| c.rows() != x0.rows()) {
            return Err(Error::Shape("diffusion batch rows disagree".into()));
        }
        let d = x0.cols();
        let mut xt = Vec::with_capacity(x0.len());
        for (i, &ti) in t.iter().enumerate() {
            xt.extend(q_sample(schedule, x0.row(i), ti, eps.row(i))?);
        }
        let x_t = Tensor::matrix(x0.rows(), d, xt)?;
        Ok(DiffusionBatch { x0, t, eps, x_t, cond })
    }

    /// Regression target for the given parameterization, row by row.
    pub fn target(&self, schedule: &NoiseSchedule, v_mode: bool) -> Result<Tensor> {
        if !v_mode {
            return Ok(self.x0.clone());
        }
        let mut out = Vec::with_capacity(self.x0.len());
        for (i, &ti) in self.t.iter().enumerate() {
            let (a, s) = schedule.alpha_sigma(ti)?;
            out.extend(lin(a, self.eps.row(i), -s, self.x0.row(i)));
        }
        Tensor::matrix(self.x0.rows(), self.x0.cols(), out)
    }
}
