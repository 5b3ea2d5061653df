//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] walks the node list in reverse.
//! Graphs are cheap to build and meant to be thrown away after each step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    LowRank { a: Var, b: Var, h: Var, rank: usize },
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.record(v, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record(v, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.record(v, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record(v, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a length-`n` vector to every row of a `m×n` matrix (layer bias).
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (mv, rv) = (self.value(m), self.value(row));
        if !mv.is_matrix() || rv.is_matrix() || rv.len() != mv.cols() {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", mv.shape(), rv.shape())));
        }
        let n = mv.cols();
        let mut data = mv.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, r) in chunk.iter_mut().zip(rv.data()) {
                *d += r;
            }
        }
        let v = Tensor::raw(mv.shape().to_vec(), data);
        self.record(v, Op::AddRow(m, row), &[m, row], "add_row")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.record(v, Op::Exp(a), &[a], "exp")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.record(v, Op::Tanh(a), &[a], "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.record(v, Op::Relu(a), &[a], "relu")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.record(v, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.record(v, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.record(v, Op::Mean(a), &[a], "mean")
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::raw(xv.shape().to_vec(), data);
        self.record(v, Op::LayerNorm { x, inv_std }, &[x], "layer_norm")
    }

    /// Per-row low-rank transform `out_i = A_i (B_i h_i)`, where row `i` of
    /// `a` holds `A_i` (`d×rank`, row-major) and row `i` of `b` holds `B_i`
    /// (`rank×d`).
    pub fn low_rank_apply(&mut self, a: Var, b: Var, h: Var, rank: usize) -> Result<Var> {
        let (av, bv, hv) = (self.value(a), self.value(b), self.value(h));
        let (rows, d) = (hv.rows(), hv.cols());
        if !hv.is_matrix()
            || av.rows() != rows
            || bv.rows() != rows
            || av.cols() != d * rank
            || bv.cols() != rank * d
        {
            return Err(Error::Shape(format!(
                "low_rank_apply a{:?} b{:?} h{:?} rank {rank}",
                av.shape(),
                bv.shape(),
                hv.shape()
            )));
        }
        let mut out = vec![0.0; rows * d];
        for i in 0..rows {
            let t = low_rank_inner(bv.row(i), hv.row(i), rank, d);
            let ai = av.row(i);
            let o = &mut out[i * d..(i + 1) * d];
            for (p, op) in o.iter_mut().enumerate() {
                *op = (0..rank).map(|q| ai[p * rank + q] * t[q]).sum();
            }
        }
        let v = Tensor::raw(vec![rows, d], out);
        self.record(v, Op::LowRank { a, b, h, rank }, &[a, b, h], "low_rank_apply")
    }

    /// Escape hatch for operations outside the built-in set. `backward`
    /// receives the output gradient and the input values and must return one
    /// gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Result<Var> {
        self.record(
            value,
            Op::Custom { inputs: inputs.to_vec(), backward: Box::new(backward) },
            inputs,
            "custom",
        )
    }

    /// Propagates d(loss)/d(node) to every node that `loss` depends on.
    /// Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if self.value(loss).shape() != [1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else { continue };
            for (parent, contribution) in self.local_grads(i, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                contribution.ensure_finite("backward")?;
                match &mut self.nodes[parent.0].grad {
                    Some(acc) => acc.add_assign(&contribution)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let ga = g.matmul(&val(*b).transpose()?)?;
                let gb = val(*a).transpose()?.matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::AddRow(m, row) => {
                let n = g.cols();
                let mut acc = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (a, v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                vec![(*m, g.clone()), (*row, Tensor::raw(val(*row).shape().to_vec(), acc))]
            }
            Op::Exp(a) => vec![(*a, g.zip_map(&node.value, |x, y| x * y)?)],
            Op::Tanh(a) => vec![(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))?)],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })?)],
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::filled(val(*a).shape(), g.data()[0] / n))]
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = vec![0.0; y.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = is * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                vec![(*x, Tensor::raw(y.shape().to_vec(), dx))]
            }
            Op::LowRank { a, b, h, rank } => {
                let (av, bv, hv) = (val(*a), val(*b), val(*h));
                let (rows, d, r) = (hv.rows(), hv.cols(), *rank);
                let mut ga = vec![0.0; rows * d * r];
                let mut gb = vec![0.0; rows * r * d];
                let mut gh = vec![0.0; rows * d];
                for i in 0..rows {
                    let (ai, bi, hi, gi) = (av.row(i), bv.row(i), hv.row(i), g.row(i));
                    let t = low_rank_inner(bi, hi, r, d);
                    // dt = A_iᵀ g_i
                    let mut dt = vec![0.0; r];
                    for p in 0..d {
                        for q in 0..r {
                            ga[i * d * r + p * r + q] = gi[p] * t[q];
                            dt[q] += ai[p * r + q] * gi[p];
                        }
                    }
                    for q in 0..r {
                        for j in 0..d {
                            gb[i * r * d + q * d + j] = dt[q] * hi[j];
                            gh[i * d + j] += bi[q * d + j] * dt[q];
                        }
                    }
                }
                vec![
                    (*a, Tensor::raw(av.shape().to_vec(), ga)),
                    (*b, Tensor::raw(bv.shape().to_vec(), gb)),
                    (*h, Tensor::raw(hv.shape().to_vec(), gh)),
                ]
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let grads = backward(g, &vals);
                if grads.len() != inputs.len() {
                    return Err(Error::Contract("custom backward returned wrong arity".into()));
                }
                for (gr, v) in grads.iter().zip(&vals) {
                    gr.same_shape(v, "custom backward")?;
                }
                inputs.iter().copied().zip(grads).collect()
            }
        };
        Ok(out)
    }
}

fn low_rank_inner(b: &[f64], h: &[f64], rank: usize, d: usize) -> Vec<f64> {
    (0..rank)
        .map(|q| b[q * d..(q + 1) * d].iter().zip(h).map(|(x, y)| x * y).sum())
        .collect()
}
