//! Seeded generators. All randomness in the crate flows from a `u64` seed and
//! a stream id, so results never depend on thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type DetRng = ChaCha8Rng;

/// Stream ids for the independent generators used by one run.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const DIFFUSION: u64 = 3;
    pub const SAMPLING: u64 = 1 << 32;
    pub const EVAL: u64 = 5;
    pub const HELD_OUT: u64 = 6;
}

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}
