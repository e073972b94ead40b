//! Reproducible random streams.
//!
//! Every random draw in the crate comes from ChaCha20 (`rand_chacha::ChaCha20Rng`)
//! seeded with `seed_from_u64(seed)`. Independent substreams (one per sampled
//! sequence, one per parameter matrix) use ChaCha's 64-bit stream selector, so
//! results do not depend on thread count or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn stream(seed: u64, stream_id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

pub fn gaussian_vec(rng: &mut ChaCha20Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

/// A uniformly random unit vector.
pub fn unit_vec(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n, 1.0);
        let nrm = crate::linalg::norm(&v);
        if nrm > 1e-12 {
            return v.into_iter().map(|x| x / nrm).collect();
        }
    }
}
