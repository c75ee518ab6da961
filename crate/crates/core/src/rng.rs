//! Seeded randomness shared by every stochastic component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::field::{Field, Units};

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for item `index` of a seeded batch.
pub fn derived(seed: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}

pub fn normal_field(rng: &mut impl Rng, height: usize, width: usize, units: Units) -> Field {
    Field::from_fn(height, width, units, |_, _| rng.sample(StandardNormal))
}
