//! Parameter storage and the fully-connected building blocks shared by the
//! VAE, the denoiser and the conditioning blocks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::rng::{normal_tensor, Rng64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for every parameter of a [`ParamStore`].
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps explicit graph handles, one per stored parameter in order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    /// Overwrites tensors by name; every stored name must be present with a
    /// matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Binds parameters as constants, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        bound.0.iter().map(|v| g.grad_or_zeros(*v)).collect()
    }

    /// Builds the loss on a fresh graph, backpropagates and applies one Adam
    /// update. Returns the loss value.
    pub fn train_step<F>(&mut self, state: &mut AdamState, loss_fn: F) -> Result<f64>
    where
        F: FnOnce(&mut Graph, &Bound) -> Result<Var>,
    {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let loss = loss_fn(&mut g, &bound)?;
        let value = g.value(loss).data()[0];
        g.backward(loss)?;
        let grads = self.grads(&g, &bound);
        adam_step(&mut self.tensors, &grads, state)?;
        Ok(value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// N(0, gain²/fan_in) weights, zero bias.
    Gain(f64),
    Zeros,
}

/// Affine layer acting on row batches: `y = x·W + b`, `W` is `d_in×d_out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, init: Init, rng: &mut Rng64) -> Self {
        let w = match init {
            Init::Gain(gain) => normal_tensor(rng, &[d_in, d_out], gain / (d_in as f64).sqrt()),
            Init::Zeros => Tensor::zeros(&[d_in, d_out]),
        };
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let xw = g.matmul(x, p.var(self.w))?;
        g.add_row(xw, p.var(self.b))
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

/// Stack of [`Linear`] layers with a shared hidden activation and an
/// identity output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    /// With `zero_last` the output layer starts at zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        zero_last: bool,
        rng: &mut Rng64,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid MLP widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if zero_last && i + 1 == n { Init::Zeros } else { Init::Gain(1.0) };
                Linear::new(store, &format!("{name}.{i}"), widths[i], widths[i + 1], init, rng)
            })
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}
