//! Seeded random streams.
//!
//! Every Monte Carlo consumer derives its generator from `(seed, stream)` so
//! results do not depend on evaluation order or thread count.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Stream families. The low 32 bits carry an index within the family.
pub mod family {
    pub const TRAIN: u64 = 1 << 32;
    pub const ANALYTIC_VARIANCE: u64 = 2 << 32;
    pub const REDUCED_KL: u64 = 3 << 32;
    pub const DIRECT_ELBO: u64 = 4 << 32;
    pub const COST_COLUMN: u64 = 5 << 32;
    pub const SAMPLER_CHAIN: u64 = 6 << 32;
    pub const CONTINUOUS_KL: u64 = 7 << 32;
    pub const GRAD_CHECK: u64 = 8 << 32;
    pub const INIT: u64 = 9 << 32;
}

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}
