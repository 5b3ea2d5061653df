//! Seeded random streams. All randomness in the crate flows through
//! [`Rng64`] so that a run is fully determined by its seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed for a named sub-stream (splitmix64 mixing).
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut z = seed ^ 0x9E37_79B9_7F4A_7C15;
    for b in tag.bytes() {
        z = z.wrapping_add(u64::from(b)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z ^= z >> 31;
    }
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut Rng64) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut Rng64, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn normal_tensor(rng: &mut Rng64, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::raw(shape.to_vec(), (0..n).map(|_| std * normal(rng)).collect())
}

/// Fisher-Yates permutation of `0..n`.
pub fn permutation(rng: &mut Rng64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
