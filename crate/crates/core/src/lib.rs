//! Weight-space generative modeling for low-rank adapters.
//!
//! The crate covers the whole path from adapter weights to conditionally
//! generated adapters: norm-balanced reparameterization and flattening
//! ([`lora`]), linear and variational compression ([`pca`], [`vae`]),
//! conditional diffusion over vectors ([`diffusion`], [`conditioning`]), a
//! synthetic teacher with a known manifold ([`synth`]) and the experiment
//! harness ([`harness`]). Everything runs on the small reverse-mode engine
//! in [`autodiff`].

pub mod autodiff;
pub mod conditioning;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod lora;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pca;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;
