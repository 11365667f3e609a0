//! Deterministic RNG derivation.
//!
//! Every stochastic choice in the pipeline draws from a ChaCha stream keyed
//! by a short list of integers (seed, sample id, epoch, ...). Streams for
//! different keys are independent, and the same key always reproduces the
//! same draws, which is what makes whole runs bit-reproducible.

use crate::tensor::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// ChaCha stream keyed by the given parts (order matters).
pub fn keyed_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Standard-normal draws in row-major order.
pub fn standard_normal<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<S> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let x: f64 = StandardNormal.sample(rng);
        S::from_f64(x)
    })
}

/// Fisher-Yates shuffle of 0..n driven by the given stream.
pub fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
