//! β-weighted variational autoencoder over flat adapter vectors.
//!
//! The loss minimized is `recon + β·kl` with `recon = ‖x − x̂‖²/d` (unit
//! variance Gaussian likelihood up to constants) and the closed-form
//! Gaussian KL against a standard normal prior, both averaged over the batch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{Activation, Bound, Init, Linear, Mlp, ParamStore};
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{derive_seed, normal_tensor, permutation, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them. Empty means one
    /// affine map each way.
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl VaeConfig {
    /// One hidden layer of width `2m`, tanh, β = 0.1.
    pub fn new(input_dim: usize, latent_dim: usize) -> Self {
        VaeConfig {
            input_dim,
            latent_dim,
            hidden: vec![2 * latent_dim],
            beta: 0.1,
            activation: Activation::Tanh,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("VAE dimensions must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("β must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig { epochs: 200, batch_size: 64, adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// One reparameterized draw and the noise behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

/// `z = μ + exp(logvar/2) ⊙ ε`.
pub fn reparameterize(mu: &[f64], logvar: &[f64], eps: &[f64]) -> Result<LatentSample> {
    if mu.len() != logvar.len() || mu.len() != eps.len() {
        return Err(Error::Shape(format!("reparameterize {} / {} / {}", mu.len(), logvar.len(), eps.len())));
    }
    let z = mu.iter().zip(logvar).zip(eps).map(|((m, lv), e)| m + (0.5 * lv).exp() * e).collect();
    Ok(LatentSample { mu: mu.to_vec(), logvar: logvar.to_vec(), z, eps: eps.to_vec() })
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, 1))` summed over dimensions.
pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub config: VaeConfig,
    pub store: ParamStore,
    enc_trunk: Option<Mlp>,
    mu_head: Linear,
    logvar_head: Linear,
    dec: Mlp,
}

impl VaeModel {
    pub fn new(config: VaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(derive_seed(config.seed, "vae-init"));
        let mut store = ParamStore::new();
        let d = config.input_dim;
        let m = config.latent_dim;
        let enc_trunk = if config.hidden.is_empty() {
            None
        } else {
            let mut widths = vec![d];
            widths.extend(&config.hidden);
            // the trunk's last layer is followed by the activation, so build
            // it as hidden layers and apply the activation explicitly
            Some(Mlp::new(&mut store, "enc", &widths, config.activation, false, &mut rng)?)
        };
        let head_in = config.hidden.last().copied().unwrap_or(d);
        let mu_head = Linear::new(&mut store, "enc.mu", head_in, m, Init::Gain(1.0), &mut rng);
        let logvar_head = Linear::new(&mut store, "enc.logvar", head_in, m, Init::Gain(0.1), &mut rng);
        let mut widths = vec![m];
        widths.extend(config.hidden.iter().rev());
        widths.push(d);
        let dec = Mlp::new(&mut store, "dec", &widths, config.activation, false, &mut rng)?;
        Ok(VaeModel { config, store, enc_trunk, mu_head, logvar_head, dec })
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let h = match &self.enc_trunk {
            Some(trunk) => {
                let h = trunk.forward(g, p, x)?;
                self.config.activation.apply(g, h)?
            }
            None => x,
        };
        Ok((self.mu_head.forward(g, p, h)?, self.logvar_head.forward(g, p, h)?))
    }

    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        self.dec.forward(g, p, z)
    }

    /// Returns `(total, recon, kl)` nodes for a batch `x` and noise `eps`.
    pub fn elbo_graph(&self, g: &mut Graph, p: &Bound, x: Var, eps: Var, beta: f64) -> Result<(Var, Var, Var)> {
        if beta < 0.0 {
            return Err(Error::Config(format!("β must be non-negative, got {beta}")));
        }
        let (mu, lv) = self.encode_graph(g, p, x)?;
        let half = g.scale(lv, 0.5)?;
        let sigma = g.exp(half)?;
        let noise = g.mul(sigma, eps)?;
        let z = g.add(mu, noise)?;
        let xh = self.decode_graph(g, p, z)?;
        let recon = g.mse(xh, x)?;
        // ½ Σ (μ² + e^lv − 1 − lv), averaged over rows
        let mu2 = g.mul(mu, mu)?;
        let var = g.exp(lv)?;
        let a = g.add(mu2, var)?;
        let b = g.sub(a, lv)?;
        let c = g.add_scalar(b, -1.0)?;
        let mean = g.mean(c)?;
        let kl = g.scale(mean, 0.5 * self.config.latent_dim as f64)?;
        let weighted = g.scale(kl, beta)?;
        let total = g.add(recon, weighted)?;
        Ok((total, recon, kl))
    }

    fn check_width(&self, t: &Tensor, width: usize) -> Result<()> {
        if t.cols() != width || !t.is_matrix() {
            return Err(Error::Shape(format!("expected rows of width {width}, got {:?}", t.shape())));
        }
        Ok(())
    }

    /// Encoder `(μ, logvar)` for every row of `x`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_width(x, self.config.input_dim)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let (mu, lv) = self.encode_graph(&mut g, &p, xv)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.check_width(z, self.config.latent_dim)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let zv = g.constant(z.clone());
        let out = self.decode_graph(&mut g, &p, zv)?;
        Ok(g.value(out).clone())
    }

    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mu, lv) = self.encode_batch(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok((mu.into_data(), lv.into_data()))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&Tensor::matrix(1, z.len(), z.to_vec())?)?.into_data())
    }

    pub fn elbo_loss(&self, x: &Tensor, eps: &Tensor, beta: f64) -> Result<ElboTerms> {
        self.check_width(x, self.config.input_dim)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let ev = g.constant(eps.clone());
        let (t, r, k) = self.elbo_graph(&mut g, &p, xv, ev, beta)?;
        let s = |v| g.value(v).data()[0];
        Ok(ElboTerms { total: s(t), recon: s(r), kl: s(k) })
    }

    /// Mean squared error of `decode(μ(x))` against `x`, per element.
    pub fn reconstruction_mse(&self, x: &Tensor) -> Result<f64> {
        let (mu, _) = self.encode_batch(x)?;
        let rec = self.decode_batch(&mu)?;
        Ok(rec.zip_map(x, |a, b| (a - b) * (a - b))?.sum() / x.len() as f64)
    }

    /// Gradient descent on `‖decode(z) − target‖²/d` from the encoder mean,
    /// with step halving whenever a step would increase the loss. Returns the
    /// best latent and its loss.
    pub fn latent_invert(&self, target: &[f64], steps: usize, lr: f64) -> Result<(Vec<f64>, f64)> {
        let (mut z, _) = self.encode(target)?;
        let mut loss = self.inversion_loss(&z, target, false)?.0;
        let mut step = lr;
        for _ in 0..steps {
            let (_, grad) = self.inversion_loss(&z, target, true)?;
            let mut accepted = false;
            for _ in 0..40 {
                let cand: Vec<f64> = z.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
                let l = self.inversion_loss(&cand, target, false)?.0;
                if l <= loss {
                    z = cand;
                    loss = l;
                    accepted = true;
                    step *= 1.5;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("latent inversion diverged".into()));
        }
        Ok((z, loss))
    }

    fn inversion_loss(&self, z: &[f64], target: &[f64], with_grad: bool) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let zv = g.param(Tensor::matrix(1, z.len(), z.to_vec())?);
        let out = self.decode_graph(&mut g, &p, zv)?;
        let t = g.constant(Tensor::matrix(1, target.len(), target.to_vec())?);
        let l = g.mse(out, t)?;
        let value = g.value(l).data()[0];
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        g.backward(l)?;
        Ok((value, g.grad_or_zeros(zv).into_data()))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("vae").with_meta("config", &self.config)?;
        for (n, t) in self.store.named() {
            c.push(n, t);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("vae")?;
        let mut m = VaeModel::new(c.meta_as("config")?)?;
        m.store.load_named(&c.tensors)?;
        Ok(m)
    }
}

/// Trains a fresh VAE with Adam; one fresh ε per sample per step.
pub fn vae_train(config: &VaeConfig, data: &Tensor, train: &VaeTrainConfig) -> Result<(VaeModel, Vec<EpochLog>)> {
    let mut model = VaeModel::new(config.clone())?;
    model.check_width(data, config.input_dim)?;
    if train.batch_size == 0 || data.rows() == 0 {
        return Err(Error::Config("empty dataset or zero batch size".into()));
    }
    let mut rng = seeded(derive_seed(config.seed, "vae-train"));
    let mut adam = AdamState::new(train.adam);
    let (n, d, m) = (data.rows(), config.input_dim, config.latent_dim);
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let order = permutation(&mut rng, n);
        let (mut tot, mut rec, mut kl, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(train.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                xb.extend_from_slice(data.row(i));
            }
            let xb = Tensor::matrix(chunk.len(), d, xb)?;
            let eps = normal_tensor(&mut rng, &[chunk.len(), m], 1.0);
            let mut terms = (0.0, 0.0);
            let model_ref = &model;
            let mut store = model_ref.store.clone();
            let total = store
                .train_step(&mut adam, |g, p| {
                    let xv = g.constant(xb.clone());
                    let ev = g.constant(eps.clone());
                    let (t, r, k) = model_ref.elbo_graph(g, p, xv, ev, config.beta)?;
                    terms = (g.value(r).data()[0], g.value(k).data()[0]);
                    Ok(t)
                })
                .map_err(|e| Error::Training { at: epoch, detail: e.to_string() })?;
            model.store = store;
            let w = chunk.len();
            tot += total * w as f64;
            rec += terms.0 * w as f64;
            kl += terms.1 * w as f64;
            seen += w;
        }
        let s = seen as f64;
        let log = EpochLog { epoch, total: tot / s, recon: rec / s, kl: kl / s };
        if !log.total.is_finite() {
            return Err(Error::Training { at: epoch, detail: "non-finite loss".into() });
        }
        history.push(log);
    }
    Ok((model, history))
}

pub fn write_loss_csv(history: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "total", "recon", "kl"])?;
    for h in history {
        w.write_record([h.epoch.to_string(), h.total.to_string(), h.recon.to_string(), h.kl.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck_many;
    use crate::rng::normal_vec;

    fn tiny(d: usize, m: usize, hidden: Vec<usize>, seed: u64) -> VaeModel {
        VaeModel::new(VaeConfig { hidden, seed, ..VaeConfig::new(d, m) }).unwrap()
    }

    #[test]
    fn zero_encoder_gives_standard_posterior() {
        let mut v = tiny(4, 2, vec![], 0);
        v.store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let (mu, lv) = v.encode(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((mu, lv), (vec![0.0; 2], vec![0.0; 2]));
    }

    #[test]
    fn identity_encoder_passes_input_through() {
        let mut v = tiny(3, 3, vec![], 0);
        let mu_w = v.mu_head.w;
        v.store.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        *v.store.get_mut(mu_w) = Tensor::eye(3);
        let (mu, _) = v.encode(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(mu, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_decoder_outputs_bias() {
        let mut v = tiny(3, 2, vec![], 0);
        let (w, b) = (v.dec.layers[0].w, v.dec.layers[0].b);
        v.store.get_mut(w).data_mut().fill(0.0);
        *v.store.get_mut(b) = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(v.decode(&[0.3, -0.7]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn reparameterize_cases() {
        let mu = [0.5, -1.0];
        assert_eq!(reparameterize(&mu, &[0.3, 0.1], &[0.0, 0.0]).unwrap().z, mu.to_vec());
        assert_eq!(reparameterize(&mu, &[0.0, 0.0], &[1.0, 0.0]).unwrap().z, vec![1.5, -1.0]);
        assert!(reparameterize(&mu, &[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn reparameterize_monte_carlo_moments() {
        let (mu, lv) = (0.7, -0.4f64);
        let mut rng = seeded(99);
        let n = 100_000;
        let zs: Vec<f64> = (0..n).map(|_| reparameterize(&[mu], &[lv], &normal_vec(&mut rng, 1)).unwrap().z[0]).collect();
        let mean = zs.iter().sum::<f64>() / n as f64;
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sigma2 = lv.exp();
        assert!((mean - mu).abs() <= 3.0 * (sigma2 / n as f64).sqrt());
        // Var of the sample variance for a Gaussian is 2σ⁴/(n−1)
        assert!((var - sigma2).abs() <= 3.0 * (2.0 * sigma2 * sigma2 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_closed_form(&[0.0; 3], &[0.0; 3]), 0.0);
        assert_eq!(kl_closed_form(&[1.0; 5], &[0.0; 5]), 2.5);
    }

    #[test]
    fn elbo_terms() {
        let v = tiny(5, 3, vec![6], 1);
        let mut rng = seeded(4);
        let x = normal_tensor(&mut rng, &[4, 5], 1.0);
        let eps = normal_tensor(&mut rng, &[4, 3], 1.0);
        let t0 = v.elbo_loss(&x, &eps, 0.0).unwrap();
        assert_eq!(t0.total, t0.recon);
        let t1 = v.elbo_loss(&x, &eps, 0.5).unwrap();
        assert!((t1.total - (t1.recon + 0.5 * t1.kl)).abs() < 1e-12);
        // kl node equals the closed form averaged over rows
        let (mu, lv) = v.encode_batch(&x).unwrap();
        let expect: f64 = (0..4).map(|i| kl_closed_form(mu.row(i), lv.row(i))).sum::<f64>() / 4.0;
        assert!((t1.kl - expect).abs() < 1e-12);
        assert!(matches!(v.elbo_loss(&x, &eps, -1.0), Err(Error::Config(_))));
    }

    fn gradcheck_vae(hidden: Vec<usize>, seed: u64) {
        let v = tiny(4, 2, hidden, seed);
        let mut rng = seeded(seed + 100);
        let x = normal_tensor(&mut rng, &[3, 4], 1.0);
        let eps = normal_tensor(&mut rng, &[3, 2], 1.0);
        let mut inputs = v.store.tensors().to_vec();
        for t in inputs.iter_mut() {
            for val in t.data_mut() {
                *val += 0.05 * crate::rng::normal(&mut rng);
            }
        }
        inputs.push(x);
        let np = v.store.tensors().len();
        let r = gradcheck_many(
            |g, vs| {
                let p = Bound::from_vars(vs[..np].to_vec());
                let ev = g.constant(eps.clone());
                let (t, _, _) = v.elbo_graph(g, &p, vs[np], ev, 0.3)?;
                Ok(t)
            },
            &inputs,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "max rel err {}", r.max_rel_error);
    }

    #[test]
    fn elbo_gradcheck_single_layer() {
        gradcheck_vae(vec![], 1);
    }

    #[test]
    fn elbo_gradcheck_hidden_layer() {
        gradcheck_vae(vec![5], 2);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let mut rng = seeded(6);
        let basis = normal_tensor(&mut rng, &[3, 12], 1.0);
        let data = normal_tensor(&mut rng, &[96, 3], 1.0).matmul(&basis).unwrap();
        let cfg = VaeConfig { seed: 3, ..VaeConfig::new(12, 4) };
        let tc = VaeTrainConfig { epochs: 60, batch_size: 32, ..VaeTrainConfig::default() };
        let (m1, h1) = vae_train(&cfg, &data, &tc).unwrap();
        let (m2, h2) = vae_train(&cfg, &data, &tc).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(m1.store, m2.store);
        assert!(h1.last().unwrap().recon < 0.5 * h1[0].recon);
    }

    #[test]
    fn latent_inversion_recovers_planted_code() {
        let v = tiny(6, 2, vec![4], 8);
        let z0 = [0.8, -0.3];
        let target = v.decode(&z0).unwrap();
        let (_, loss) = v.latent_invert(&target, 500, 0.1).unwrap();
        assert!(loss <= 1e-6, "loss {loss}");
        let (zs, l0) = v.latent_invert(&target, 0, 0.1).unwrap();
        assert_eq!(zs, v.encode(&target).unwrap().0);
        assert!(loss <= l0);
    }

    #[test]
    fn container_roundtrip() {
        let v = tiny(5, 2, vec![3], 2);
        let c = Container::from_bytes(&v.to_container().unwrap().to_bytes().unwrap()).unwrap();
        let back = VaeModel::from_container(&c).unwrap();
        assert_eq!(back.config, v.config);
        let x = [0.1, 0.2, -0.3, 0.4, 0.5];
        let (a, b) = (v.encode(&x).unwrap().0, back.encode(&x).unwrap().0);
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-5));
    }
}
