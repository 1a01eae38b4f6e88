//! Deterministic parameter initialization.
//!
//! Each parameter draws from its own generator keyed by `(seed, name)`, so a parameter's
//! initial value does not depend on which other parameters exist or on creation order.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&h.finalize());
    ChaCha8Rng::from_seed(key)
}

pub fn uniform<T: Scalar>(shape: &[usize], bound: f64, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = param_rng(seed, name);
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(dist.sample(&mut rng)))
}

/// He-uniform for ReLU networks: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    uniform(shape, (6.0 / fan_in.max(1) as f64).sqrt(), seed, name)
}

/// Glorot-uniform: `U(-sqrt(6/(fan_in+fan_out)), ...)`.
pub fn xavier_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, seed: u64, name: &str) -> Tensor<T> {
    uniform(shape, (6.0 / (fan_in + fan_out).max(1) as f64).sqrt(), seed, name)
}
