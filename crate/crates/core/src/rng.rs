//! Seeded random streams. Every consumer derives its own ChaCha stream
//! from the run seed so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream tags for the independent consumers of a run seed.
pub mod stream {
    pub const BACKBONE: u64 = 1;
    pub const SOA: u64 = 2;
    pub const HEAD: u64 = 3;
    pub const PROXIES: u64 = 4;
    pub const DATA: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const BATCHES: u64 = 7;
    pub const AUGMENT: u64 = 8;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}
