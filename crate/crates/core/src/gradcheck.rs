//! Central finite-difference gradient checker.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute rather than
/// relative terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Relative error per coordinate, inputs concatenated in order.
    pub errors: Vec<f64>,
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub tol: f64,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let val = g.value(out);
    if val.shape() != [1] {
        return Err(Error::Contract(format!("gradcheck needs scalar output, got {:?}", val.shape())));
    }
    Ok(val.data()[0])
}

/// Compares analytic gradients of `f` w.r.t. every input tensor with central
/// differences of step `h`.
pub fn gradcheck_many<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Config("gradcheck step must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| g.grad_or_zeros(*v)).collect();

    let mut errors = Vec::new();
    let mut worst = (0, 0);
    let mut max_rel_error = 0.0f64;
    let mut probe = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + h;
            let plus = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = orig - h;
            let minus = eval_scalar(&f, &probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > max_rel_error {
                max_rel_error = err;
                worst = (k, i);
            }
            errors.push(err);
        }
    }
    Ok(GradcheckReport { errors, max_rel_error, worst, tol, passed: max_rel_error <= tol })
}

/// Single-input form of [`gradcheck_many`].
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    gradcheck_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h, tol)
}
